#include "dtlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "dtlab/tensor.hpp"  // split_seed

namespace dtlab {

using nlohmann::json;

namespace {

// Integral values within the exact double range serialize as JSON
// integers; everything else keeps shortest-round-trip doubles.
json num(double v) {
  if (std::floor(v) == v && std::abs(v) < 9.0e15) return static_cast<int64_t>(v);
  return v;
}

json num_array(const std::vector<double>& vs) {
  json a = json::array();
  for (double v : vs) a.push_back(num(v));
  return a;
}

[[noreturn]] void corrupt(const std::string& path, int64_t line, const std::string& why) {
  throw std::runtime_error("corrupt dataset " + path + " at line " + std::to_string(line) + ": " +
                           why);
}

}  // namespace

void WindowBatch::validate() const {
  const int64_t n = slots();
  if (static_cast<int64_t>(returns_to_go.size()) != n ||
      static_cast<int64_t>(timesteps.size()) != n || static_cast<int64_t>(valid.size()) != n ||
      static_cast<int64_t>(states.size()) != n * state_dim) {
    throw std::invalid_argument("WindowBatch: field lengths disagree with batch*context");
  }
  if (actions.empty() && actions_cont.empty())
    throw std::invalid_argument("WindowBatch: no actions");
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t i = 1; i < context; ++i) {
      const size_t cur = static_cast<size_t>(b * context + i);
      const size_t prev = cur - 1;
      if (valid[prev] && !valid[cur])
        throw std::invalid_argument("WindowBatch: padding must be a left prefix");
      if (valid[prev] && valid[cur] && timesteps[cur] != timesteps[prev] + 1)
        throw std::invalid_argument("WindowBatch: timesteps must increase by 1 in the valid region");
    }
  }
}

std::vector<double> compute_returns_to_go(const std::vector<double>& rewards) {
  if (rewards.empty()) throw std::invalid_argument("compute_returns_to_go: empty reward list");
  std::vector<double> rtg(rewards.size());
  double acc = 0.0;
  for (size_t i = rewards.size(); i-- > 0;) {
    acc += rewards[i];
    rtg[i] = acc;
  }
  return rtg;
}

void Trajectory::finalize() {
  if (states.size() != actions.size() || actions.size() != rewards.size()) {
    throw std::invalid_argument("Trajectory: states/actions/rewards lengths differ (" +
                                std::to_string(states.size()) + "/" +
                                std::to_string(actions.size()) + "/" +
                                std::to_string(rewards.size()) + ")");
  }
  returns_to_go = compute_returns_to_go(rewards);
  episode_return = returns_to_go.front();
}

int64_t TrajectoryDataset::total_timesteps() const {
  return cumulative_.empty() ? 0 : cumulative_.back();
}

void TrajectoryDataset::add(Trajectory t) {
  const int64_t prev = total_timesteps();
  cumulative_.push_back(prev + t.length());
  trajectories_.push_back(std::move(t));
}

void TrajectoryDataset::reindex() {
  cumulative_.clear();
  cumulative_.reserve(trajectories_.size());
  int64_t acc = 0;
  for (const auto& t : trajectories_) {
    acc += t.length();
    cumulative_.push_back(acc);
  }
}

int64_t TrajectoryDataset::state_dim() const {
  if (trajectories_.empty() || trajectories_[0].states.empty()) return 0;
  return static_cast<int64_t>(trajectories_[0].states[0].size());
}

TrajectoryDataset TrajectoryDataset::collect_random(const Env& proto, int64_t count,
                                                    uint64_t seed) {
  if (count < 1) throw std::invalid_argument("collect_random: count must be >= 1");
  TrajectoryDataset ds;
  auto env = proto.clone();
  for (int64_t i = 0; i < count; ++i) {
    const uint64_t episode_seed = split_seed(seed, static_cast<uint64_t>(i));
    env->reset(episode_seed);
    std::mt19937_64 rng(split_seed(seed, static_cast<uint64_t>(i), 1));
    std::uniform_int_distribution<int64_t> pick(0, env->n_actions() - 1);
    Trajectory t;
    t.env_seed = episode_seed;
    t.policy = "random";
    while (!env->done()) {
      EnvTransition tr = env->step(pick(rng));
      t.states.push_back(std::move(tr.state));
      t.actions.push_back(tr.action);
      t.rewards.push_back(tr.reward);
    }
    t.finalize();
    ds.add(std::move(t));
  }
  ds.manifest.n_trajectories = count;
  ds.manifest.total_timesteps = ds.total_timesteps();
  ds.manifest.seed = seed;
  ds.manifest.policy = "random";
  return ds;
}

TrajectoryDataset TrajectoryDataset::filter_top_percentile(double x_percent) const {
  if (x_percent <= 0.0 || x_percent > 100.0)
    throw std::invalid_argument("filter_top_percentile: X must be in (0,100]");
  if (trajectories_.empty()) throw std::invalid_argument("filter_top_percentile: empty dataset");
  std::vector<size_t> order(trajectories_.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return trajectories_[a].episode_return > trajectories_[b].episode_return;
  });
  const int64_t target =
      static_cast<int64_t>(std::ceil(x_percent / 100.0 * static_cast<double>(total_timesteps())));
  std::vector<uint8_t> keep(trajectories_.size(), 0);
  int64_t kept = 0;
  for (size_t idx : order) {
    if (kept >= target) break;
    keep[idx] = 1;
    kept += trajectories_[idx].length();
  }
  TrajectoryDataset out;
  out.manifest = manifest;
  for (size_t i = 0; i < trajectories_.size(); ++i)
    if (keep[i]) out.add(trajectories_[i]);
  out.manifest.n_trajectories = out.size();
  out.manifest.total_timesteps = out.total_timesteps();
  return out;
}

TrajectoryDataset TrajectoryDataset::filter_min_return(double threshold) const {
  TrajectoryDataset out;
  out.manifest = manifest;
  for (const auto& t : trajectories_)
    if (t.episode_return >= threshold) out.add(t);
  out.manifest.n_trajectories = out.size();
  out.manifest.total_timesteps = out.total_timesteps();
  return out;
}

TrajectoryDataset TrajectoryDataset::with_delayed_returns() const {
  TrajectoryDataset out;
  out.manifest = manifest;
  out.manifest.delayed = true;
  for (const auto& t : trajectories_) {
    Trajectory d = t;
    d.rewards = delay_returns(t.rewards);
    d.finalize();
    out.add(std::move(d));
  }
  out.manifest.n_trajectories = out.size();
  out.manifest.total_timesteps = out.total_timesteps();
  return out;
}

std::pair<int64_t, int64_t> TrajectoryDataset::locate(int64_t flat_index) const {
  if (flat_index < 0 || flat_index >= total_timesteps())
    throw std::invalid_argument("locate: flat index out of range");
  const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), flat_index);
  const int64_t traj = static_cast<int64_t>(it - cumulative_.begin());
  const int64_t before = traj == 0 ? 0 : cumulative_[static_cast<size_t>(traj - 1)];
  return {traj, flat_index - before};
}

void TrajectoryDataset::fill_window(int64_t traj_index, int64_t anchor_t, int64_t context,
                                    WindowBatch& out, int64_t slot) const {
  const Trajectory& t = trajectories_[static_cast<size_t>(traj_index)];
  const int64_t sd = out.state_dim;
  const int64_t first = anchor_t - context + 1;  // may be negative: left padding
  for (int64_t i = 0; i < context; ++i) {
    const int64_t src = first + i;
    const int64_t dst = slot * context + i;
    if (src < 0) {
      out.valid[static_cast<size_t>(dst)] = 0;
      out.returns_to_go[static_cast<size_t>(dst)] = 0.0;
      out.actions[static_cast<size_t>(dst)] = 0;
      out.timesteps[static_cast<size_t>(dst)] = 0;
      std::fill_n(out.states.begin() + dst * sd, sd, 0.0);
    } else {
      out.valid[static_cast<size_t>(dst)] = 1;
      out.returns_to_go[static_cast<size_t>(dst)] = t.returns_to_go[static_cast<size_t>(src)];
      out.actions[static_cast<size_t>(dst)] = t.actions[static_cast<size_t>(src)];
      out.timesteps[static_cast<size_t>(dst)] = src;
      const auto& s = t.states[static_cast<size_t>(src)];
      std::copy(s.begin(), s.end(), out.states.begin() + dst * sd);
    }
  }
}

WindowBatch TrajectoryDataset::sample_windows(int64_t context, int64_t batch,
                                              std::mt19937_64& rng) const {
  if (trajectories_.empty()) throw std::invalid_argument("sample_windows: empty dataset");
  if (context < 1 || batch < 1)
    throw std::invalid_argument("sample_windows: context and batch must be positive");
  WindowBatch wb;
  wb.batch = batch;
  wb.context = context;
  wb.state_dim = state_dim();
  const int64_t slots = batch * context;
  wb.returns_to_go.assign(static_cast<size_t>(slots), 0.0);
  wb.states.assign(static_cast<size_t>(slots * wb.state_dim), 0.0);
  wb.actions.assign(static_cast<size_t>(slots), 0);
  wb.timesteps.assign(static_cast<size_t>(slots), 0);
  wb.valid.assign(static_cast<size_t>(slots), 0);
  std::uniform_int_distribution<int64_t> pick(0, total_timesteps() - 1);
  for (int64_t b = 0; b < batch; ++b) {
    const auto [traj, anchor] = locate(pick(rng));
    fill_window(traj, anchor, context, wb, b);
  }
  return wb;
}

// ----- JSON-Lines IO -----

void TrajectoryDataset::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_dataset: cannot open " + path + " for writing");
  json m;
  m["format_version"] = manifest.format_version;
  m["env_kind"] = manifest.env_kind;
  m["env_config"] = manifest.env_config.empty() ? json::object() : json::parse(manifest.env_config);
  m["n_trajectories"] = manifest.n_trajectories;
  m["total_timesteps"] = manifest.total_timesteps;
  m["seed"] = manifest.seed;
  m["policy"] = manifest.policy;
  m["delayed"] = manifest.delayed;
  out << m.dump() << '\n';
  for (const auto& t : trajectories_) {
    json j;
    json states = json::array();
    for (const auto& s : t.states) states.push_back(num_array(s));
    j["states"] = std::move(states);
    j["actions"] = t.actions;
    j["rewards"] = num_array(t.rewards);
    j["episode_return"] = num(t.episode_return);
    j["env_seed"] = t.env_seed;
    j["policy"] = t.policy;
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("save_dataset: write failed for " + path);
}

TrajectoryDataset TrajectoryDataset::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_dataset: cannot open " + path);
  std::string line;
  int64_t line_no = 0;
  if (!std::getline(in, line)) corrupt(path, 1, "missing manifest line");
  line_no = 1;
  TrajectoryDataset ds;
  try {
    json m = json::parse(line);
    ds.manifest.format_version = m.at("format_version").get<int>();
    if (ds.manifest.format_version != 1)
      corrupt(path, 1, "unsupported format_version " + std::to_string(ds.manifest.format_version));
    ds.manifest.env_kind = m.at("env_kind").get<std::string>();
    ds.manifest.env_config = m.at("env_config").dump();
    ds.manifest.n_trajectories = m.at("n_trajectories").get<int64_t>();
    ds.manifest.total_timesteps = m.at("total_timesteps").get<int64_t>();
    ds.manifest.seed = m.at("seed").get<uint64_t>();
    ds.manifest.policy = m.at("policy").get<std::string>();
    ds.manifest.delayed = m.value("delayed", false);
  } catch (const json::exception& e) {
    corrupt(path, 1, std::string("bad manifest: ") + e.what());
  }
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    Trajectory t;
    try {
      json j = json::parse(line);
      for (const auto& s : j.at("states")) t.states.push_back(s.get<std::vector<double>>());
      t.actions = j.at("actions").get<std::vector<int64_t>>();
      t.rewards = j.at("rewards").get<std::vector<double>>();
      t.env_seed = j.at("env_seed").get<uint64_t>();
      t.policy = j.at("policy").get<std::string>();
      const double stored_return = j.at("episode_return").get<double>();
      t.finalize();
      if (t.episode_return != stored_return)
        corrupt(path, line_no, "episode_return does not match reward sum");
    } catch (const json::exception& e) {
      corrupt(path, line_no, e.what());
    }
    ds.add(std::move(t));
  }
  if (ds.size() != ds.manifest.n_trajectories) {
    corrupt(path, line_no,
            "manifest declares " + std::to_string(ds.manifest.n_trajectories) +
                " trajectories, file holds " + std::to_string(ds.size()) +
                " (last good line " + std::to_string(line_no) + ")");
  }
  if (ds.total_timesteps() != ds.manifest.total_timesteps)
    corrupt(path, line_no, "manifest timestep count does not match trajectories");
  return ds;
}

}  // namespace dtlab
