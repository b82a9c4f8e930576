#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dtlab/dataset.hpp"
#include "dtlab/dt_model.hpp"
#include "dtlab/optim.hpp"

namespace dtlab {

enum class Objective { dt, bc };
enum class DecayMode { warmup_only, warmup_cosine };

struct TrainConfig {
  int64_t steps = 10000;
  int64_t batch_size = 64;
  double learning_rate = 1e-4;
  int64_t warmup_steps = 100;
  DecayMode decay = DecayMode::warmup_cosine;
  double grad_clip = 0.25;
  double weight_decay = 1e-4;
  double dropout = 0.1;
  uint64_t seed = 0;
  Objective objective = Objective::dt;
  double return_loss_weight = 1.0;
  int64_t snapshot_every = 0;  // 0 disables evaluation snapshots

  void validate() const;
};

// Linear warmup to learning_rate over warmup_steps, then either held
// flat or cosine-decayed over the remaining steps. Continuous at the
// warmup/decay boundary.
double lr_at(int64_t step, const TrainConfig& cfg);

struct TrainLogRow {
  int64_t step = 0;
  double loss = 0.0;
  double action_loss = 0.0;
  double return_loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;
  double wall_seconds = 0.0;
};

// Step-at-a-time trainer so runs can checkpoint and resume exactly.
// Fully deterministic per seed: batch sampling, dropout masks and the
// update sequence all derive from TrainConfig::seed.
class Trainer {
 public:
  Trainer(DTModel& model, const TrajectoryDataset& data, TrainConfig cfg);

  TrainLogRow step();
  int64_t steps_done() const { return step_; }
  const TrainConfig& config() const { return cfg_; }

  // Opaque resume blob: optimizer moments, data RNG stream, step count.
  std::string state_blob() const;
  void restore(const std::string& blob);

 private:
  DTModel& model_;
  const TrajectoryDataset& data_;
  TrainConfig cfg_;
  AdamW opt_;
  std::mt19937_64 data_rng_;
  int64_t step_ = 0;
};

using SnapshotHook = std::function<void(int64_t step, const DTModel& model)>;

// Runs the full loop; aborts with the step index on a non-finite loss.
TrainLog train(DTModel& model, const TrajectoryDataset& data, const TrainConfig& cfg,
               const SnapshotHook& snapshot = nullptr);

}  // namespace dtlab
