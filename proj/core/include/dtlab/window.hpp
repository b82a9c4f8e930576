#pragma once

#include <cstdint>
#include <vector>

namespace dtlab {

// A batch of length-K trajectory slices, flattened [B*K] in window-major
// order. Windows are anchored at their last timestep and left-padded at
// episode starts; padded slots carry valid = 0 and zeroed content.
// Within the valid region timesteps increase by exactly 1 and
// returns_to_go obeys rtg[i] = rtg[i+1] + reward[i] of the source
// trajectory.
struct WindowBatch {
  int64_t batch = 0;
  int64_t context = 0;  // K
  int64_t state_dim = 0;
  std::vector<double> returns_to_go;   // [B*K]
  std::vector<double> states;          // [B*K*state_dim]
  std::vector<int64_t> actions;        // [B*K] discrete action indices
  std::vector<double> actions_cont;    // [B*K*action_dim] when continuous
  std::vector<int64_t> timesteps;      // [B*K]
  std::vector<uint8_t> valid;          // [B*K]

  int64_t slots() const { return batch * context; }
  void validate() const;
};

}  // namespace dtlab
