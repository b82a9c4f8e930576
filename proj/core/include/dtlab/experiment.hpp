#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dtlab/dataset.hpp"
#include "dtlab/dt_model.hpp"
#include "dtlab/envs.hpp"
#include "dtlab/train.hpp"

// Configuration-driven experiment runner: one JSON document fully
// determines an experiment (env, dataset, model, training, evaluation
// plan); identical config + seed reproduces byte-identical CSVs.

namespace dtlab {

// Schema violation; reported with the offending field path. Maps to the
// usage/config exit code in the CLI.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunSpec {
  std::string name;
  std::string objective = "dt";  // dt | bc | random | pretrained
  std::string checkpoint;        // pretrained: checkpoint path to load
  std::string layout = "dt";     // evaluation token layout (dt | bc)
  std::string filter_json;       // optional dataset filter
  std::string model_override;    // partial model json merged over defaults
  std::string train_override;
};

struct PlanItem {
  std::string type;  // success_rate | sweep | prior_rollouts | return_traces | attention_trace
  std::string params_json;
  std::vector<std::string> runs;  // empty: every applicable run
};

struct ExperimentConfig {
  std::string name;
  uint64_t seed = 0;
  std::string output_dir;
  std::string env_json;
  std::string dataset_json;
  std::string model_json;
  std::string train_json;
  std::vector<RunSpec> runs;
  uint64_t eval_seed = 0;
  std::vector<PlanItem> plan;
  std::string canonical;  // normalized full-document dump (hashed into tables)
};

ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);

std::unique_ptr<Env> make_env(const std::string& env_json);
// Normalized env-config document stored in dataset manifests and
// compared on load.
std::string canonical_env_config(const std::string& env_json);

DTConfig model_config_from_json(const std::string& model_json, const Env& env,
                                const std::string& objective);
TrainConfig train_config_from_json(const std::string& train_json);

struct MetricsBundle {
  std::string output_dir;
  std::string config_hash;
  std::vector<std::string> files;
  std::map<std::string, double> summary;
  std::vector<std::string> notes;
};

MetricsBundle run_experiment(const ExperimentConfig& cfg);

// ----- report emitters -----

// Steps-to-goal histogram (nullopt = goal not reached, the overflow
// bin) for the random-walk dataset, the BFS oracle and the model.
void emit_histogram(const std::string& csv_path, const std::string& svg_path,
                    const std::vector<std::optional<int64_t>>& random_walk,
                    const std::vector<std::optional<int64_t>>& oracle,
                    const std::vector<std::optional<int64_t>>& model, int64_t horizon,
                    const std::string& config_hash, uint64_t seed);

struct ReturnTraceGroup {
  std::string name;
  std::vector<std::vector<double>> traces;  // per episode, per timestep P(return bin)
};

// Per-timestep mean predicted probability per outcome group; empty
// groups are omitted and reported in the returned notes.
std::vector<std::string> emit_return_traces(const std::string& csv_path,
                                            const std::vector<ReturnTraceGroup>& groups,
                                            const std::string& config_hash, uint64_t seed);

// Long-format (target timestep, source timestep, mass) table of the
// aggregated attention of one episode.
void emit_attention_trace(const std::string& csv_path,
                          const std::vector<std::vector<double>>& mass,
                          const std::string& config_hash, uint64_t seed);

}  // namespace dtlab
