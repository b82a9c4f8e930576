#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dtlab/tensor.hpp"

namespace dtlab {

// Scales every gradient in the store by clip_norm/total when the global
// L2 norm exceeds clip_norm; direction is preserved. Returns the
// pre-clip norm. clip_norm <= 0 disables clipping.
double clip_global_norm(ParamStore& params, double clip_norm);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;
};

// Decoupled-weight-decay Adam with bias correction. Moments are laid
// out per parameter in store order and must match shapes exactly.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  // Clips (global norm) then applies one update in place. Rejects
  // non-finite gradients naming the offending parameter.
  void step(ParamStore& params, double lr, double clip_norm);

  int64_t step_count() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }

  // Opaque state blob for training resume (moments + step).
  std::string serialize() const;
  void deserialize(const std::string& blob, const ParamStore& params);

 private:
  void ensure_state(const ParamStore& params);

  AdamWConfig cfg_;
  int64_t step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace dtlab
