#include "dtlab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dtlab {

namespace {

// History kept by the evaluation loop; windows are rebuilt from the
// tail so truncation to K is a no-op until the history overflows.
struct History {
  std::vector<std::vector<double>> states;
  std::vector<int64_t> actions;
  std::vector<double> rtg;
  int64_t len() const { return static_cast<int64_t>(states.size()); }
};

WindowBatch window_from_history(const History& h, int64_t context_k, int64_t state_dim) {
  const int64_t ctx = std::min<int64_t>(context_k, h.len());
  const int64_t first = h.len() - ctx;
  WindowBatch wb;
  wb.batch = 1;
  wb.context = ctx;
  wb.state_dim = state_dim;
  wb.returns_to_go.resize(static_cast<size_t>(ctx));
  wb.states.resize(static_cast<size_t>(ctx * state_dim));
  wb.actions.resize(static_cast<size_t>(ctx));
  wb.timesteps.resize(static_cast<size_t>(ctx));
  wb.valid.assign(static_cast<size_t>(ctx), 1);
  for (int64_t i = 0; i < ctx; ++i) {
    const int64_t src = first + i;
    wb.returns_to_go[static_cast<size_t>(i)] = h.rtg[static_cast<size_t>(src)];
    wb.actions[static_cast<size_t>(i)] = h.actions[static_cast<size_t>(src)];
    wb.timesteps[static_cast<size_t>(i)] = src;
    const auto& s = h.states[static_cast<size_t>(src)];
    std::copy(s.begin(), s.end(), wb.states.begin() + i * state_dim);
  }
  return wb;
}

int64_t pick_action(const Tensor& logits_row, ActionSelect select, double temperature,
                    std::mt19937_64& rng) {
  const auto& v = logits_row.data();
  if (select == ActionSelect::argmax) {
    return static_cast<int64_t>(std::max_element(v.begin(), v.end()) - v.begin());
  }
  double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> p(v.size());
  double denom = 0.0;
  for (size_t i = 0; i < v.size(); ++i) {
    p[i] = std::exp((v[i] - mx) / std::max(1e-9, temperature));
    denom += p[i];
  }
  std::uniform_real_distribution<double> u(0.0, denom);
  double r = u(rng);
  for (size_t i = 0; i < p.size(); ++i) {
    r -= p[i];
    if (r <= 0.0) return static_cast<int64_t>(i);
  }
  return static_cast<int64_t>(p.size()) - 1;
}

Tensor row_of(const Tensor& mat, int64_t row) {
  const int64_t c = mat.dim(1);
  std::vector<double> v(static_cast<size_t>(c));
  std::copy_n(mat.data().data() + row * c, c, v.data());
  return Tensor({c}, std::move(v));
}

void finish_episode(EpisodeRecord& ep, const Env& env) {
  ep.steps = static_cast<int64_t>(ep.actions.size());
  ep.achieved_return = 0.0;
  for (double r : ep.rewards) ep.achieved_return += r;
  ep.success = env.task_success();
  if (const auto* k2d = dynamic_cast<const KeyToDoorEnv*>(&env)) {
    ep.reached_door = k2d->reached_door();
    ep.key_pickup_step = k2d->key_pickup_step();
  }
}

}  // namespace

EpisodeRecord rollout(const DTModel& model, Env& env, const RolloutConfig& cfg) {
  if (env.done()) throw std::invalid_argument("rollout: env must be freshly reset");
  const int64_t K = cfg.context_k > 0 ? cfg.context_k : model.config().context_k;
  const int64_t max_steps = cfg.max_steps > 0 ? cfg.max_steps : env.max_episode_len();
  std::mt19937_64 rng(split_seed(cfg.seed, 0xac7));
  History h;
  EpisodeRecord ep;
  double target = cfg.target_return;
  int64_t t = 0;
  while (!env.done() && t < max_steps) {
    h.states.push_back(env.observe());
    h.rtg.push_back(target);
    h.actions.push_back(0);  // placeholder, causally invisible to its own prediction
    WindowBatch wb = window_from_history(h, K, model.config().state_dim);
    DTForwardOptions fopts;
    fopts.layout = cfg.layout;
    DTOutput out = model.forward(wb, fopts);
    const int64_t last = wb.context - 1;
    const int64_t action =
        pick_action(row_of(out.action_out, last), cfg.action_select, cfg.temperature, rng);
    h.actions.back() = action;
    EnvTransition tr = env.step(action);
    ep.states.push_back(std::move(tr.state));
    ep.actions.push_back(action);
    ep.rewards.push_back(tr.reward);
    ep.conditioned_rtg.push_back(target);
    target -= tr.reward;
    t += 1;
  }
  finish_episode(ep, env);
  return ep;
}

ReturnPrior ReturnPrior::shortest_path(int64_t horizon, double gamma) {
  if (horizon < 1) throw std::invalid_argument("ReturnPrior: horizon must be positive");
  ReturnPrior p;
  p.gamma = gamma;
  double total = 0.0;
  for (int64_t k = horizon; k >= 0; --k) {
    p.support.push_back(-static_cast<double>(k));
    const double w = static_cast<double>(horizon + 1 - k);
    p.weights.push_back(w);
    total += w;
  }
  for (double& w : p.weights) w /= total;
  return p;
}

std::vector<double> combine_with_prior(const std::vector<double>& model_probs,
                                       const ReturnPrior& prior) {
  if (model_probs.size() != prior.weights.size())
    throw std::invalid_argument("combine_with_prior: model bins do not match prior support");
  std::vector<double> out(model_probs.size());
  double total = 0.0;
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = model_probs[i] * std::pow(prior.weights[i], prior.gamma);
    total += out[i];
  }
  if (total <= 0.0) {
    // degenerate product; fall back to the prior itself
    return prior.weights;
  }
  for (double& v : out) v /= total;
  return out;
}

EpisodeRecord rollout_with_return_prior(const DTModel& model, Env& env, const ReturnPrior& prior,
                                        const RolloutConfig& cfg) {
  if (!model.config().predict_returns)
    throw std::invalid_argument("rollout_with_return_prior: model has no return head");
  if (model.config().return_bins != prior.support)
    throw std::invalid_argument(
        "rollout_with_return_prior: prior support does not match the model's return bins");
  if (env.done()) throw std::invalid_argument("rollout: env must be freshly reset");
  const int64_t K = cfg.context_k > 0 ? cfg.context_k : model.config().context_k;
  const int64_t max_steps = cfg.max_steps > 0 ? cfg.max_steps : env.max_episode_len();
  std::mt19937_64 rng(split_seed(cfg.seed, 0xbead));
  History h;
  EpisodeRecord ep;
  int64_t t = 0;
  while (!env.done() && t < max_steps) {
    h.states.push_back(env.observe());
    h.rtg.push_back(0.0);  // placeholder until generated
    h.actions.push_back(0);
    WindowBatch wb = window_from_history(h, K, model.config().state_dim);
    const int64_t last = wb.context - 1;
    // pass 1: return distribution for this step (reads the token before
    // this step's return, so the placeholder is invisible)
    DTOutput out = model.forward(wb);
    if (!out.return_valid[static_cast<size_t>(last)])
      throw std::runtime_error(
          "rollout_with_return_prior: no causally valid return prediction at step " +
          std::to_string(t) + " (context too short)");
    Tensor logits = row_of(*out.return_logits, last);
    std::vector<double> probs(logits.data().size());
    {
      const auto& lv = logits.data();
      double mx = *std::max_element(lv.begin(), lv.end());
      double denom = 0.0;
      for (size_t i = 0; i < lv.size(); ++i) {
        probs[i] = std::exp(lv[i] - mx);
        denom += probs[i];
      }
      for (double& p : probs) p /= denom;
    }
    std::vector<double> combined = combine_with_prior(probs, prior);
    int64_t bin;
    if (cfg.return_select == ActionSelect::argmax) {
      bin = static_cast<int64_t>(
          std::max_element(combined.begin(), combined.end()) - combined.begin());
    } else {
      std::uniform_real_distribution<double> u(0.0, 1.0);
      double r = u(rng);
      bin = static_cast<int64_t>(combined.size()) - 1;
      for (size_t i = 0; i < combined.size(); ++i) {
        r -= combined[i];
        if (r <= 0.0) {
          bin = static_cast<int64_t>(i);
          break;
        }
      }
    }
    const double rtg = prior.support[static_cast<size_t>(bin)];
    h.rtg.back() = rtg;
    // pass 2: action conditioned on the generated return
    wb = window_from_history(h, K, model.config().state_dim);
    out = model.forward(wb);
    const int64_t action = pick_action(row_of(out.action_out, last), cfg.action_select,
                                       cfg.temperature, rng);
    h.actions.back() = action;
    EnvTransition tr = env.step(action);
    ep.states.push_back(std::move(tr.state));
    ep.actions.push_back(action);
    ep.rewards.push_back(tr.reward);
    ep.conditioned_rtg.push_back(rtg);
    t += 1;
  }
  finish_episode(ep, env);
  return ep;
}

std::vector<SweepRow> target_return_sweep(const DTModel& model, const Env& env,
                                          const std::vector<double>& targets,
                                          int64_t episodes_per_target, uint64_t seed) {
  if (targets.empty()) throw std::invalid_argument("target_return_sweep: no targets");
  if (episodes_per_target < 1)
    throw std::invalid_argument("target_return_sweep: episodes_per_target must be >= 1");
  std::vector<SweepRow> rows;
  for (double target : targets) {
    double sum = 0.0, sumsq = 0.0;
    for (int64_t e = 0; e < episodes_per_target; ++e) {
      auto episode_env = env.clone();
      episode_env->reset(split_seed(seed, static_cast<uint64_t>(e)));
      RolloutConfig rc;
      rc.target_return = target;
      rc.seed = split_seed(seed, static_cast<uint64_t>(e), 1);
      EpisodeRecord ep = rollout(model, *episode_env, rc);
      sum += ep.achieved_return;
      sumsq += ep.achieved_return * ep.achieved_return;
    }
    SweepRow row;
    row.target = target;
    row.episodes = episodes_per_target;
    row.mean_achieved = sum / static_cast<double>(episodes_per_target);
    row.std_achieved = std::sqrt(
        std::max(0.0, sumsq / static_cast<double>(episodes_per_target) -
                          row.mean_achieved * row.mean_achieved));
    rows.push_back(row);
  }
  return rows;
}

StitchLabel stitching_analysis(const EpisodeRecord& episode, const TrajectoryDataset& dataset) {
  if (!episode.success) return StitchLabel::failed;
  const int64_t n = episode.steps;
  for (const auto& traj : dataset.trajectories()) {
    const int64_t m = traj.length();
    for (int64_t off = 0; off + n <= m; ++off) {
      bool match = true;
      for (int64_t i = 0; i < n && match; ++i) {
        match = traj.actions[static_cast<size_t>(off + i)] ==
                    episode.actions[static_cast<size_t>(i)] &&
                traj.states[static_cast<size_t>(off + i)] == episode.states[static_cast<size_t>(i)];
      }
      if (match) return StitchLabel::contained;
    }
  }
  return StitchLabel::stitched;
}

double success_rate(const DTModel& model, const Env& env, int64_t n_episodes,
                    double target_return, uint64_t seed, TokenLayout layout) {
  if (n_episodes < 1) throw std::invalid_argument("success_rate: n_episodes must be >= 1");
  int64_t wins = 0;
  for (int64_t e = 0; e < n_episodes; ++e) {
    auto episode_env = env.clone();
    episode_env->reset(split_seed(seed, static_cast<uint64_t>(e)));
    RolloutConfig rc;
    rc.target_return = target_return;
    rc.layout = layout;
    rc.seed = split_seed(seed, static_cast<uint64_t>(e), 1);
    EpisodeRecord ep = rollout(model, *episode_env, rc);
    if (ep.success) wins += 1;
  }
  return static_cast<double>(wins) / static_cast<double>(n_episodes);
}

std::vector<double> return_probability_trace(const DTModel& model,
                                             const std::vector<std::vector<double>>& states,
                                             const std::vector<int64_t>& actions,
                                             const std::vector<double>& returns_to_go,
                                             int64_t probe_bin) {
  const int64_t L = static_cast<int64_t>(states.size());
  if (L == 0 || actions.size() != states.size() || returns_to_go.size() != states.size())
    throw std::invalid_argument("return_probability_trace: inconsistent episode");
  if (L > model.config().context_k)
    throw std::invalid_argument("return_probability_trace: episode longer than model context");
  if (!model.config().predict_returns)
    throw std::invalid_argument("return_probability_trace: model has no return head");
  const int64_t sd = model.config().state_dim;
  WindowBatch wb;
  wb.batch = 1;
  wb.context = L;
  wb.state_dim = sd;
  wb.returns_to_go = returns_to_go;
  wb.actions = actions;
  wb.states.resize(static_cast<size_t>(L * sd));
  wb.timesteps.resize(static_cast<size_t>(L));
  wb.valid.assign(static_cast<size_t>(L), 1);
  for (int64_t i = 0; i < L; ++i) {
    wb.timesteps[static_cast<size_t>(i)] = i;
    std::copy(states[static_cast<size_t>(i)].begin(), states[static_cast<size_t>(i)].end(),
              wb.states.begin() + i * sd);
  }
  DTOutput out = model.forward(wb);
  const int64_t bins = out.return_logits->dim(1);
  std::vector<double> trace(static_cast<size_t>(L), 0.0);
  for (int64_t i = 0; i < L; ++i) {
    if (!out.return_valid[static_cast<size_t>(i)]) continue;
    Tensor logits = row_of(*out.return_logits, i);
    const auto& lv = logits.data();
    double mx = *std::max_element(lv.begin(), lv.end());
    double denom = 0.0;
    std::vector<double> p(static_cast<size_t>(bins));
    for (int64_t j = 0; j < bins; ++j) {
      p[static_cast<size_t>(j)] = std::exp(lv[static_cast<size_t>(j)] - mx);
      denom += p[static_cast<size_t>(j)];
    }
    trace[static_cast<size_t>(i)] = p[static_cast<size_t>(probe_bin)] / denom;
  }
  return trace;
}

double pearson_correlation(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2)
    throw std::invalid_argument("pearson_correlation: need two equal-length series");
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

std::vector<std::vector<double>> aggregate_attention_by_timestep(const AttentionTrace& trace,
                                                                 const DTConfig& cfg,
                                                                 int64_t episode_len) {
  const int64_t base = cfg.predict_returns ? 1 : 0;
  const int64_t T = trace.n_tokens;
  if (T != base + 3 * episode_len)
    throw std::invalid_argument("aggregate_attention_by_timestep: trace/episode length mismatch");
  std::vector<std::vector<double>> mass(
      static_cast<size_t>(episode_len),
      std::vector<double>(static_cast<size_t>(episode_len), 0.0));
  for (const auto& per_layer : trace.probs) {
    for (const auto& per_head : per_layer) {
      const auto& probs = per_head[0];  // single-sample trace
      for (int64_t q = base; q < T; ++q) {
        const int64_t qt = (q - base) / 3;
        // fold source tokens onto timesteps (start-token mass dropped),
        // renormalized per query
        std::vector<double> row(static_cast<size_t>(episode_len), 0.0);
        double total = 0.0;
        for (int64_t s = base; s <= q; ++s) {
          const int64_t st = (s - base) / 3;
          row[static_cast<size_t>(st)] += probs[static_cast<size_t>(q * T + s)];
          total += probs[static_cast<size_t>(q * T + s)];
        }
        if (total <= 0.0) continue;
        for (int64_t st = 0; st <= qt; ++st)
          mass[static_cast<size_t>(qt)][static_cast<size_t>(st)] +=
              row[static_cast<size_t>(st)] / total;
      }
    }
  }
  const double lh = static_cast<double>(trace.probs.size()) *
                    static_cast<double>(trace.probs.empty() ? 0 : trace.probs[0].size());
  for (int64_t qt = 0; qt < episode_len; ++qt) {
    const double denom = lh * 3.0;  // three modality queries per timestep
    if (denom <= 0.0) continue;
    for (double& v : mass[static_cast<size_t>(qt)]) v /= denom;
  }
  return mass;
}

}  // namespace dtlab
