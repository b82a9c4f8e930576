#include "dtlab/train.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace dtlab {

void TrainConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("TrainConfig: steps must be positive");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be positive");
  if (learning_rate <= 0.0) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
  if (warmup_steps < 1) throw std::invalid_argument("TrainConfig: warmup_steps must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0)
    throw std::invalid_argument("TrainConfig: dropout must be in [0,1)");
}

double lr_at(int64_t step, const TrainConfig& cfg) {
  if (step < 0) throw std::invalid_argument("lr_at: negative step");
  if (step < cfg.warmup_steps) {
    return cfg.learning_rate * static_cast<double>(step + 1) /
           static_cast<double>(cfg.warmup_steps);
  }
  if (cfg.decay == DecayMode::warmup_only) return cfg.learning_rate;
  const double span = static_cast<double>(std::max<int64_t>(1, cfg.steps - cfg.warmup_steps));
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / span);
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Trainer::Trainer(DTModel& model, const TrajectoryDataset& data, TrainConfig cfg)
    : model_(model), data_(data), cfg_(cfg) {
  cfg_.validate();
  if (data_.size() == 0) throw std::invalid_argument("Trainer: empty dataset");
  if (data_.state_dim() != model_.config().state_dim)
    throw std::invalid_argument("Trainer: dataset state_dim " + std::to_string(data_.state_dim()) +
                                " does not match model " +
                                std::to_string(model_.config().state_dim));
  AdamWConfig ocfg;
  ocfg.weight_decay = cfg_.weight_decay;
  opt_ = AdamW(ocfg);
  data_rng_.seed(split_seed(cfg_.seed, 0xda7a));
}

TrainLogRow Trainer::step() {
  const double lr = lr_at(step_, cfg_);
  WindowBatch wb = data_.sample_windows(model_.config().context_k, cfg_.batch_size, data_rng_);
  ComputationRecord rec;
  TrainLogRow row;
  {
    RecordScope scope(rec);
    DTForwardOptions opts;
    opts.layout = cfg_.objective == Objective::bc ? TokenLayout::bc : TokenLayout::dt;
    if (cfg_.dropout > 0.0) opts.dropout_seed = split_seed(cfg_.seed, 0xd60, step_);
    DTOutput out = model_.forward(wb, opts);
    Tensor loss = model_.action_loss(out, wb);
    row.action_loss = loss.value();
    if (out.return_logits && cfg_.objective == Objective::dt) {
      Tensor rl = model_.return_loss(out, wb);
      row.return_loss = rl.value();
      loss = add(loss, mul_scalar(rl, cfg_.return_loss_weight));
    }
    row.loss = loss.value();
    if (!std::isfinite(row.loss))
      throw std::runtime_error("train: non-finite loss at step " + std::to_string(step_));
    model_.params().zero_grads();
    rec.backward(loss);
  }
  row.grad_norm = clip_global_norm(model_.params(), cfg_.grad_clip);
  opt_.step(model_.params(), lr, /*clip_norm=*/0.0);
  row.lr = lr;
  row.step = step_;
  step_ += 1;
  return row;
}

std::string Trainer::state_blob() const {
  std::ostringstream os;
  os << step_ << '\n' << data_rng_ << '\n' << opt_.serialize();
  return os.str();
}

void Trainer::restore(const std::string& blob) {
  std::istringstream is(blob);
  if (!(is >> step_)) throw std::runtime_error("Trainer: corrupt resume state");
  if (!(is >> data_rng_)) throw std::runtime_error("Trainer: corrupt RNG state");
  std::string rest((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  opt_.deserialize(rest, model_.params());
}

TrainLog train(DTModel& model, const TrajectoryDataset& data, const TrainConfig& cfg,
               const SnapshotHook& snapshot) {
  const auto t0 = std::chrono::steady_clock::now();
  Trainer trainer(model, data, cfg);
  // the model's configured dropout rate is owned by TrainConfig here
  model.set_dropout_rate(cfg.dropout);
  TrainLog log;
  log.rows.reserve(static_cast<size_t>(cfg.steps));
  for (int64_t s = 0; s < cfg.steps; ++s) {
    log.rows.push_back(trainer.step());
    if (snapshot && cfg.snapshot_every > 0 && (s + 1) % cfg.snapshot_every == 0)
      snapshot(s + 1, model);
  }
  log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return log;
}

}  // namespace dtlab
