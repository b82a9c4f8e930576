#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dtlab/dataset.hpp"
#include "dtlab/dt_model.hpp"
#include "dtlab/envs.hpp"

namespace dtlab {

enum class ActionSelect { argmax, sample };

struct RolloutConfig {
  double target_return = 0.0;
  int64_t context_k = 0;  // 0: use the model's context
  int64_t max_steps = 0;  // 0: env's max episode length
  ActionSelect action_select = ActionSelect::argmax;
  // bc evaluates the return-free (s, a) layout; the target return is
  // then only bookkeeping.
  TokenLayout layout = TokenLayout::dt;
  // Return-bin choice in prior mode; sampling keeps generated episodes
  // diverse across seeds.
  ActionSelect return_select = ActionSelect::sample;
  double temperature = 1.0;
  uint64_t seed = 0;
};

struct EpisodeRecord {
  std::vector<std::vector<double>> states;
  std::vector<int64_t> actions;
  std::vector<double> rewards;
  // The return-to-go fed to the model at each step (decremented target,
  // or the generated value under the return prior).
  std::vector<double> conditioned_rtg;
  double achieved_return = 0.0;
  int64_t steps = 0;
  bool success = false;
  // Key-to-Door extras
  bool reached_door = false;
  std::optional<int64_t> key_pickup_step;
};

// Autoregressive evaluation loop: the target return is decremented by
// each received reward, history is truncated to the last K timesteps,
// and the action is read from the latest state-token prediction. The
// env must be freshly reset by the caller.
EpisodeRecord rollout(const DTModel& model, Env& env, const RolloutConfig& cfg);

// Fixed distribution over achievable returns whose weight rises toward
// shorter paths: weight(R=-k) = T+1-k over k = 0..T.
struct ReturnPrior {
  double gamma = 10.0;
  std::vector<double> support;  // ascending returns
  std::vector<double> weights;  // normalized, aligned with support

  static ReturnPrior shortest_path(int64_t horizon, double gamma = 10.0);
};

// Combined model/prior distribution over the return support at one
// step: softmax(logits) * prior^gamma, renormalized.
std::vector<double> combine_with_prior(const std::vector<double>& model_probs,
                                       const ReturnPrior& prior);

// Each step first generates its own return-to-go from the renormalized
// product of the model's return distribution and the prior, then
// conditions the action on it. Requires a return-predicting model whose
// bins match the prior support; consumes no oracle information.
EpisodeRecord rollout_with_return_prior(const DTModel& model, Env& env, const ReturnPrior& prior,
                                        const RolloutConfig& cfg);

struct SweepRow {
  double target = 0.0;
  double mean_achieved = 0.0;
  double std_achieved = 0.0;
  int64_t episodes = 0;
};

// Runs episodes_per_target rollouts per target; episode seeds are
// shared across targets so rows are paired.
std::vector<SweepRow> target_return_sweep(const DTModel& model, const Env& env,
                                          const std::vector<double>& targets,
                                          int64_t episodes_per_target, uint64_t seed);

enum class StitchLabel { contained, stitched, failed };

// contained: the episode's (state, action) sequence appears as a
// contiguous subsequence of some dataset trajectory; stitched: goal
// reached but the sequence is original; failed: goal not reached.
StitchLabel stitching_analysis(const EpisodeRecord& episode, const TrajectoryDataset& dataset);

// Fraction of rollouts ending in task success, conditioned on
// target_return (full-episode context).
double success_rate(const DTModel& model, const Env& env, int64_t n_episodes,
                    double target_return, uint64_t seed, TokenLayout layout = TokenLayout::dt);

// Per-step predicted probability of each return bin for a given
// observed episode, teacher-forcing states/actions. Return inputs are
// fed per the model's configuration (zeroed for the critic variant).
// probe_bin selects the bin whose probability is returned per step.
std::vector<double> return_probability_trace(const DTModel& model,
                                             const std::vector<std::vector<double>>& states,
                                             const std::vector<int64_t>& actions,
                                             const std::vector<double>& returns_to_go,
                                             int64_t probe_bin);

double pearson_correlation(const std::vector<double>& xs, const std::vector<double>& ys);

// Attention mass per (target timestep, source timestep), aggregated
// over layers, heads, the three modality tokens and the start token,
// normalized per query and averaged within each target timestep.
// Requires a traced full-episode forward.
std::vector<std::vector<double>> aggregate_attention_by_timestep(const AttentionTrace& trace,
                                                                 const DTConfig& cfg,
                                                                 int64_t episode_len);

}  // namespace dtlab
