#include "dtlab/envs.hpp"

#include <algorithm>
#include <deque>
#include <stdexcept>

#include "dtlab/tensor.hpp"  // split_seed

namespace dtlab {

// ----- GraphEnv -----

GraphEnv GraphEnv::generate(const GraphConfig& cfg) {
  if (cfg.n_nodes < 2) throw std::invalid_argument("GraphEnv: need at least 2 nodes");
  if (cfg.sparsity <= 0.0 || cfg.sparsity > 1.0)
    throw std::invalid_argument("GraphEnv: sparsity must be in (0,1]");
  if (cfg.max_steps < 1) throw std::invalid_argument("GraphEnv: max_steps must be positive");
  const int64_t n = cfg.n_nodes;
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::mt19937_64 rng(split_seed(cfg.seed, static_cast<uint64_t>(attempt)));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    GraphEnv env;
    env.cfg_ = cfg;
    env.adjacency_.assign(static_cast<size_t>(n * n), 0);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j)
        if (i != j && u(rng) < cfg.sparsity) env.adjacency_[static_cast<size_t>(i * n + j)] = 1;
    // candidate goals: reachable from at least one other node
    std::vector<int64_t> candidates;
    for (int64_t g = 0; g < n; ++g) {
      env.goal_ = g;
      bool reachable = false;
      for (int64_t s = 0; s < n && !reachable; ++s)
        reachable = s != g && env.shortest_path_oracle(s).has_value();
      if (reachable) candidates.push_back(g);
    }
    if (candidates.empty()) continue;
    std::uniform_int_distribution<size_t> pick(0, candidates.size() - 1);
    env.goal_ = candidates[pick(rng)];
    return env;
  }
  throw std::runtime_error("GraphEnv: no layout with a reachable goal after 100 attempts");
}

void GraphEnv::reset(uint64_t episode_seed) {
  std::mt19937_64 rng(episode_seed);
  std::uniform_int_distribution<int64_t> pick(0, cfg_.n_nodes - 1);
  int64_t start = pick(rng);
  while (start == goal_) start = pick(rng);
  reset_at(start);
}

void GraphEnv::reset_at(int64_t start_node) {
  if (start_node < 0 || start_node >= cfg_.n_nodes)
    throw std::invalid_argument("GraphEnv: start node out of range");
  position_ = start_node;
  steps_ = 0;
  done_ = start_node == goal_;
}

std::vector<double> GraphEnv::observe() const {
  std::vector<double> obs(static_cast<size_t>(cfg_.n_nodes), 0.0);
  obs[static_cast<size_t>(position_)] = 1.0;
  return obs;
}

bool GraphEnv::has_edge(int64_t from, int64_t to) const {
  return adjacency_[static_cast<size_t>(from * cfg_.n_nodes + to)] != 0;
}

EnvTransition GraphEnv::step(int64_t action) {
  if (done_) throw std::runtime_error("GraphEnv: step after episode end");
  if (action < 0 || action >= cfg_.n_nodes)
    throw std::invalid_argument("GraphEnv: action " + std::to_string(action) + " out of [0," +
                                std::to_string(cfg_.n_nodes) + ")");
  EnvTransition tr;
  tr.state = observe();
  tr.action = action;
  if (has_edge(position_, action)) position_ = action;
  steps_ += 1;
  tr.reward = position_ == goal_ ? 0.0 : -1.0;
  done_ = position_ == goal_ || steps_ >= cfg_.max_steps;
  tr.done = done_;
  return tr;
}

std::vector<double> GraphEnv::return_support() const {
  std::vector<double> support;
  for (int64_t k = cfg_.max_steps; k >= 0; --k) support.push_back(-static_cast<double>(k));
  return support;
}

std::optional<int64_t> GraphEnv::shortest_path_oracle(int64_t start) const {
  if (start < 0 || start >= cfg_.n_nodes)
    throw std::invalid_argument("GraphEnv: start node out of range");
  if (start == goal_) return 0;
  std::vector<int64_t> dist(static_cast<size_t>(cfg_.n_nodes), -1);
  dist[static_cast<size_t>(start)] = 0;
  std::deque<int64_t> frontier{start};
  while (!frontier.empty()) {
    const int64_t u = frontier.front();
    frontier.pop_front();
    for (int64_t v = 0; v < cfg_.n_nodes; ++v) {
      if (!has_edge(u, v) || dist[static_cast<size_t>(v)] >= 0) continue;
      dist[static_cast<size_t>(v)] = dist[static_cast<size_t>(u)] + 1;
      if (v == goal_) return dist[static_cast<size_t>(v)];
      frontier.push_back(v);
    }
  }
  return std::nullopt;
}

std::vector<int64_t> GraphEnv::reachable_starts() const {
  std::vector<int64_t> starts;
  for (int64_t s = 0; s < cfg_.n_nodes; ++s)
    if (s != goal_ && shortest_path_oracle(s).has_value()) starts.push_back(s);
  return starts;
}

// ----- KeyToDoorEnv -----

KeyToDoorEnv::KeyToDoorEnv(const KeyToDoorConfig& cfg) : cfg_(cfg) {
  if (cfg_.room < 2 || cfg_.room % 2 == 0)
    throw std::invalid_argument("KeyToDoorEnv: room side must be odd and >= 3");
  for (int64_t b : cfg_.budgets)
    if (b < 1) throw std::invalid_argument("KeyToDoorEnv: phase budgets must be positive");
}

int64_t KeyToDoorEnv::obs_dim() const {
  const int64_t cells = cfg_.room * cfg_.room;
  // phase(3) + agent(cells) + key(cells + absent) + door(cells + absent) [+ has_key]
  return 3 + cells + (cells + 1) + (cells + 1) + (cfg_.observe_key_flag ? 1 : 0);
}

int64_t KeyToDoorEnv::max_episode_len() const {
  return cfg_.budgets[0] + cfg_.budgets[1] + cfg_.budgets[2];
}

void KeyToDoorEnv::reset(uint64_t episode_seed) {
  std::mt19937_64 rng(episode_seed);
  const int64_t cells = cfg_.room * cfg_.room;
  std::uniform_int_distribution<int64_t> pick(0, cells - 1);
  key_cell_ = pick(rng);
  while (key_cell_ == center_cell()) key_cell_ = pick(rng);
  door_cell_ = pick(rng);
  while (door_cell_ == center_cell()) door_cell_ = pick(rng);
  has_key_ = false;
  reached_door_ = false;
  success_ = false;
  done_ = false;
  key_step_.reset();
  total_steps_ = 0;
  enter_phase(1);
}

void KeyToDoorEnv::enter_phase(int64_t phase) {
  phase_ = phase;
  phase_steps_ = 0;
  agent_ = cfg_.room / 2;
  agent_col_ = cfg_.room / 2;
  key_visible_ = phase == 1 && !has_key_;
}

std::vector<double> KeyToDoorEnv::observe() const {
  const int64_t cells = cfg_.room * cfg_.room;
  std::vector<double> obs(static_cast<size_t>(obs_dim()), 0.0);
  obs[static_cast<size_t>(phase_ - 1)] = 1.0;
  size_t off = 3;
  obs[off + static_cast<size_t>(agent_cell())] = 1.0;
  off += static_cast<size_t>(cells);
  // key slot: its cell while visible in phase 1, else the absent index
  obs[off + static_cast<size_t>(key_visible_ ? key_cell_ : cells)] = 1.0;
  off += static_cast<size_t>(cells + 1);
  obs[off + static_cast<size_t>(phase_ == 3 ? door_cell_ : cells)] = 1.0;
  off += static_cast<size_t>(cells + 1);
  if (cfg_.observe_key_flag) obs[off] = has_key_ ? 1.0 : 0.0;
  return obs;
}

EnvTransition KeyToDoorEnv::step(int64_t action) {
  if (done_) throw std::runtime_error("KeyToDoorEnv: step after episode end");
  if (action < 0 || action >= 4)
    throw std::invalid_argument("KeyToDoorEnv: action " + std::to_string(action) +
                                " out of [0,4)");
  EnvTransition tr;
  tr.state = observe();
  tr.action = action;
  int64_t r = agent_, c = agent_col_;
  switch (action) {
    case 0: r -= 1; break;
    case 1: r += 1; break;
    case 2: c -= 1; break;
    case 3: c += 1; break;
  }
  // wall clipping
  if (r >= 0 && r < cfg_.room) agent_ = r;
  if (c >= 0 && c < cfg_.room) agent_col_ = c;
  phase_steps_ += 1;
  total_steps_ += 1;

  if (phase_ == 1 && key_visible_ && agent_cell() == key_cell_) {
    has_key_ = true;
    key_visible_ = false;
    key_step_ = total_steps_ - 1;
  }
  if (phase_ == 3 && agent_cell() == door_cell_) {
    reached_door_ = true;
    success_ = has_key_;
    tr.reward = has_key_ ? 1.0 : 0.0;
    done_ = true;
    tr.done = true;
    return tr;
  }
  if (phase_steps_ >= cfg_.budgets[static_cast<size_t>(phase_ - 1)]) {
    if (phase_ == 3) {
      done_ = true;
    } else {
      enter_phase(phase_ + 1);
    }
  }
  tr.reward = 0.0;
  tr.done = done_;
  return tr;
}

// ----- delayed returns -----

std::vector<double> delay_returns(const std::vector<double>& rewards) {
  if (rewards.empty()) throw std::invalid_argument("delay_returns: empty reward list");
  double total = 0.0;
  for (double r : rewards) total += r;
  std::vector<double> out(rewards.size(), 0.0);
  out.back() = total;
  return out;
}

}  // namespace dtlab
