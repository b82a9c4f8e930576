#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

// The two desk-scale MDPs: random directed graph shortest path and the
// three-phase Key-to-Door gridworld. Both are deterministic given
// (seed, action sequence).

namespace dtlab {

struct EnvTransition {
  std::vector<double> state;  // observation at which the action was taken
  int64_t action = 0;
  double reward = 0.0;
  bool done = false;
};

class Env {
 public:
  virtual ~Env() = default;
  virtual void reset(uint64_t episode_seed) = 0;
  virtual std::vector<double> observe() const = 0;
  virtual EnvTransition step(int64_t action) = 0;
  virtual bool done() const = 0;
  // True when the episode ended with the task solved (goal reached /
  // door opened with key).
  virtual bool task_success() const = 0;
  virtual int64_t obs_dim() const = 0;
  virtual int64_t n_actions() const = 0;
  virtual int64_t max_episode_len() const = 0;
  // Achievable integer episode returns, ascending (return-head bins).
  virtual std::vector<double> return_support() const = 0;
  virtual std::unique_ptr<Env> clone() const = 0;
};

// ----- graph shortest path -----

struct GraphConfig {
  int64_t n_nodes = 20;
  double sparsity = 0.1;
  int64_t max_steps = 10;
  uint64_t seed = 0;
};

class GraphEnv : public Env {
 public:
  // Directed edge (i != j) present independently with probability
  // `sparsity`; goal drawn uniformly among nodes reachable from some
  // other node. Retries a bounded number of layouts, then throws.
  static GraphEnv generate(const GraphConfig& cfg);

  void reset(uint64_t episode_seed) override;
  void reset_at(int64_t start_node);
  std::vector<double> observe() const override;  // one-hot over nodes
  EnvTransition step(int64_t action) override;
  bool done() const override { return done_; }
  bool task_success() const override { return position_ == goal_; }
  int64_t obs_dim() const override { return cfg_.n_nodes; }
  int64_t n_actions() const override { return cfg_.n_nodes; }
  int64_t max_episode_len() const override { return cfg_.max_steps; }
  std::vector<double> return_support() const override;  // {-T, ..., 0}
  std::unique_ptr<Env> clone() const override { return std::make_unique<GraphEnv>(*this); }

  bool has_edge(int64_t from, int64_t to) const;
  int64_t goal() const { return goal_; }
  int64_t position() const { return position_; }
  const GraphConfig& config() const { return cfg_; }
  // BFS distance to the goal; nullopt when unreachable.
  std::optional<int64_t> shortest_path_oracle(int64_t start) const;
  // Non-goal nodes with a finite oracle distance.
  std::vector<int64_t> reachable_starts() const;

 private:
  GraphConfig cfg_;
  std::vector<uint8_t> adjacency_;  // n x n
  int64_t goal_ = 0;
  int64_t position_ = 0;
  int64_t steps_ = 0;
  bool done_ = true;
};

// ----- key to door -----

struct KeyToDoorConfig {
  int64_t room = 5;                            // square room side
  std::array<int64_t, 3> budgets = {12, 8, 12};  // steps per phase
  bool observe_key_flag = false;
};

// Phase 1: room with a key; phase 2: empty room; phase 3: room with a
// door. Reaching the door ends the episode with reward 1 iff the key
// was picked up in phase 1, and 0 otherwise. All other rewards are 0.
// Phases advance on budget exhaustion regardless of behavior; the agent
// re-enters each room at its center. Key and door cells are drawn
// uniformly among non-center cells per episode.
class KeyToDoorEnv : public Env {
 public:
  explicit KeyToDoorEnv(const KeyToDoorConfig& cfg = {});

  void reset(uint64_t episode_seed) override;
  std::vector<double> observe() const override;
  EnvTransition step(int64_t action) override;  // 0 up, 1 down, 2 left, 3 right
  bool done() const override { return done_; }
  bool task_success() const override { return success_; }
  int64_t obs_dim() const override;
  int64_t n_actions() const override { return 4; }
  int64_t max_episode_len() const override;
  std::vector<double> return_support() const override { return {0.0, 1.0}; }
  std::unique_ptr<Env> clone() const override { return std::make_unique<KeyToDoorEnv>(*this); }

  const KeyToDoorConfig& config() const { return cfg_; }
  int64_t phase() const { return phase_; }
  bool has_key() const { return has_key_; }
  bool reached_door() const { return reached_door_; }
  // Episode timestep at which the key was picked up, if it was.
  std::optional<int64_t> key_pickup_step() const { return key_step_; }
  int64_t key_cell() const { return key_cell_; }
  int64_t door_cell() const { return door_cell_; }
  int64_t agent_cell() const { return agent_ * cfg_.room + agent_col_; }

 private:
  int64_t center_cell() const { return (cfg_.room / 2) * cfg_.room + cfg_.room / 2; }
  void enter_phase(int64_t phase);

  KeyToDoorConfig cfg_;
  int64_t phase_ = 1;
  int64_t phase_steps_ = 0;
  int64_t total_steps_ = 0;
  int64_t agent_ = 0, agent_col_ = 0;  // row, col
  int64_t key_cell_ = 0, door_cell_ = 0;
  bool has_key_ = false;
  bool key_visible_ = false;
  bool reached_door_ = false;
  bool success_ = false;
  bool done_ = true;
  std::optional<int64_t> key_step_;
};

// Sparse-return transform: zeros everywhere, total reward moved to the
// final timestep. Preserves the episode return.
std::vector<double> delay_returns(const std::vector<double>& rewards);

}  // namespace dtlab
