#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dtlab/envs.hpp"
#include "dtlab/window.hpp"

namespace dtlab {

struct Trajectory {
  std::vector<std::vector<double>> states;
  std::vector<int64_t> actions;
  std::vector<double> rewards;
  std::vector<double> returns_to_go;  // derived suffix sums
  double episode_return = 0.0;
  uint64_t env_seed = 0;
  std::string policy = "random";

  int64_t length() const { return static_cast<int64_t>(actions.size()); }
  // Recomputes returns_to_go and episode_return from rewards.
  void finalize();
};

// Suffix sums of the rewards; the last element equals the last reward.
std::vector<double> compute_returns_to_go(const std::vector<double>& rewards);

struct DatasetManifest {
  int format_version = 1;
  std::string env_kind;     // "graph" | "key_to_door"
  std::string env_config;   // canonical JSON of the environment config
  int64_t n_trajectories = 0;
  int64_t total_timesteps = 0;
  uint64_t seed = 0;
  std::string policy = "random";
  bool delayed = false;
};

class TrajectoryDataset {
 public:
  TrajectoryDataset() = default;

  DatasetManifest manifest;
  std::vector<Trajectory>& trajectories() { return trajectories_; }
  const std::vector<Trajectory>& trajectories() const { return trajectories_; }
  int64_t size() const { return static_cast<int64_t>(trajectories_.size()); }
  int64_t total_timesteps() const;

  void add(Trajectory t);
  // Rebuilds the cumulative timestep index; call after bulk edits.
  void reindex();

  // Uniformly random actions, one deterministic sub-seed per episode.
  static TrajectoryDataset collect_random(const Env& proto, int64_t count, uint64_t seed);

  // Keeps whole episodes ordered by episode return (descending, ties by
  // original order) until the kept timesteps first reach
  // ceil(x_percent/100 * total). Output preserves original order.
  TrajectoryDataset filter_top_percentile(double x_percent) const;
  // Keeps episodes with episode_return >= threshold.
  TrajectoryDataset filter_min_return(double threshold) const;
  // Applies delay_returns to every trajectory's rewards.
  TrajectoryDataset with_delayed_returns() const;

  // Anchor timestep drawn uniformly over all timesteps via the
  // cumulative index; the window ends at the anchor and extends K steps
  // back, left-padded at the episode start.
  WindowBatch sample_windows(int64_t context, int64_t batch, std::mt19937_64& rng) const;
  // Deterministic single window, exposed for tests and evaluation.
  void fill_window(int64_t traj_index, int64_t anchor_t, int64_t context, WindowBatch& out,
                   int64_t slot) const;

  // (episode, timestep) for a flat uniform draw in [0, total_timesteps).
  std::pair<int64_t, int64_t> locate(int64_t flat_index) const;

  int64_t state_dim() const;

  // JSON-Lines: manifest line then one trajectory object per line.
  // Round-trip is value-exact; load recomputes returns-to-go and
  // verifies stored episode returns.
  void save(const std::string& path) const;
  static TrajectoryDataset load(const std::string& path);

 private:
  std::vector<Trajectory> trajectories_;
  std::vector<int64_t> cumulative_;  // prefix sums of lengths
};

}  // namespace dtlab
