#include "dtlab/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "dtlab/eval.hpp"
#include "dtlab/report.hpp"

namespace dtlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void config_fail(const std::string& path, const std::string& why) {
  throw ConfigError("config." + path + ": " + why);
}

json parse_json(const std::string& text, const std::string& where) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    config_fail(where, std::string("invalid JSON: ") + e.what());
  }
}

const json& req(const json& j, const std::string& key, const std::string& path) {
  if (!j.contains(key)) config_fail(path + "." + key, "missing required field");
  return j.at(key);
}

template <typename T>
T req_as(const json& j, const std::string& key, const std::string& path) {
  try {
    return req(j, key, path).get<T>();
  } catch (const json::exception&) {
    config_fail(path + "." + key, "wrong type");
  }
}

template <typename T>
T opt_as(const json& j, const std::string& key, const std::string& path, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    config_fail(path + "." + key, "wrong type");
  }
}

// run-level overrides sit on top of the experiment defaults, key by key
json merge_shallow(const json& base, const json& over) {
  json out = base.is_object() ? base : json::object();
  if (over.is_object()) {
    for (auto it = over.begin(); it != over.end(); ++it) out[it.key()] = it.value();
  }
  return out;
}

std::string fmt(double v) { return format_number(v); }

}  // namespace

// ----- config parsing -----

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json j = parse_json(json_text, "");
  ExperimentConfig cfg;
  cfg.name = req_as<std::string>(j, "name", "");
  cfg.seed = req_as<uint64_t>(j, "seed", "");
  cfg.output_dir = req_as<std::string>(j, "output_dir", "");
  cfg.env_json = req(j, "env", "").dump();
  cfg.dataset_json = req(j, "dataset", "").dump();
  cfg.model_json = opt_as<json>(j, "model", "", json::object()).dump();
  cfg.train_json = opt_as<json>(j, "train", "", json::object()).dump();
  const json& runs = req(j, "runs", "");
  if (!runs.is_array() || runs.empty()) config_fail("runs", "must be a non-empty array");
  for (size_t i = 0; i < runs.size(); ++i) {
    const std::string path = "runs[" + std::to_string(i) + "]";
    const json& r = runs[i];
    RunSpec spec;
    spec.name = req_as<std::string>(r, "name", path);
    spec.objective = opt_as<std::string>(r, "objective", path, "dt");
    if (spec.objective != "dt" && spec.objective != "bc" && spec.objective != "random" &&
        spec.objective != "pretrained")
      config_fail(path + ".objective",
                  "must be one of dt|bc|random|pretrained, got " + spec.objective);
    if (spec.objective == "pretrained")
      spec.checkpoint = req_as<std::string>(r, "checkpoint", path);
    spec.layout = opt_as<std::string>(r, "layout", path, spec.objective == "bc" ? "bc" : "dt");
    if (spec.layout != "dt" && spec.layout != "bc")
      config_fail(path + ".layout", "must be dt|bc");
    if (r.contains("filter")) spec.filter_json = r.at("filter").dump();
    if (r.contains("model")) spec.model_override = r.at("model").dump();
    if (r.contains("train")) spec.train_override = r.at("train").dump();
    for (const auto& other : cfg.runs)
      if (other.name == spec.name) config_fail(path + ".name", "duplicate run name " + spec.name);
    cfg.runs.push_back(std::move(spec));
  }
  const json eval = opt_as<json>(j, "eval", "", json::object());
  cfg.eval_seed = opt_as<uint64_t>(eval, "seed", "eval", cfg.seed + 1);
  const json plan = opt_as<json>(eval, "plan", "eval", json::array());
  if (!plan.is_array()) config_fail("eval.plan", "must be an array");
  for (size_t i = 0; i < plan.size(); ++i) {
    const std::string path = "eval.plan[" + std::to_string(i) + "]";
    PlanItem item;
    item.type = req_as<std::string>(plan[i], "type", path);
    static const std::vector<std::string> kinds = {"success_rate", "sweep", "prior_rollouts",
                                                   "return_traces", "attention_trace"};
    if (std::find(kinds.begin(), kinds.end(), item.type) == kinds.end())
      config_fail(path + ".type", "unknown evaluation type " + item.type);
    item.params_json = plan[i].dump();
    item.runs = opt_as<std::vector<std::string>>(plan[i], "runs", path, {});
    cfg.plan.push_back(std::move(item));
  }
  cfg.canonical = j.dump();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_experiment_config(text);
}

// ----- env / model / train wiring -----

std::unique_ptr<Env> make_env(const std::string& env_json) {
  json e = parse_json(env_json, "env");
  const std::string kind = req_as<std::string>(e, "kind", "env");
  if (kind == "graph") {
    GraphConfig gc;
    gc.n_nodes = opt_as<int64_t>(e, "n_nodes", "env", 20);
    gc.sparsity = opt_as<double>(e, "sparsity", "env", 0.1);
    gc.max_steps = opt_as<int64_t>(e, "max_steps", "env", 10);
    gc.seed = opt_as<uint64_t>(e, "env_seed", "env", 0);
    try {
      return std::make_unique<GraphEnv>(GraphEnv::generate(gc));
    } catch (const std::invalid_argument& ex) {
      config_fail("env", ex.what());
    }
  }
  if (kind == "key_to_door") {
    KeyToDoorConfig kc;
    kc.room = opt_as<int64_t>(e, "room", "env", 5);
    const auto budgets = opt_as<std::vector<int64_t>>(e, "budgets", "env", {12, 8, 12});
    if (budgets.size() != 3) config_fail("env.budgets", "need exactly three phase budgets");
    kc.budgets = {budgets[0], budgets[1], budgets[2]};
    kc.observe_key_flag = opt_as<bool>(e, "observe_key_flag", "env", false);
    try {
      return std::make_unique<KeyToDoorEnv>(kc);
    } catch (const std::invalid_argument& ex) {
      config_fail("env", ex.what());
    }
  }
  config_fail("env.kind", "unknown environment kind " + kind);
}

std::string canonical_env_config(const std::string& env_json) {
  json e = parse_json(env_json, "env");
  json out;
  const std::string kind = req_as<std::string>(e, "kind", "env");
  out["kind"] = kind;
  if (kind == "graph") {
    out["n_nodes"] = opt_as<int64_t>(e, "n_nodes", "env", 20);
    out["sparsity"] = opt_as<double>(e, "sparsity", "env", 0.1);
    out["max_steps"] = opt_as<int64_t>(e, "max_steps", "env", 10);
    out["env_seed"] = opt_as<uint64_t>(e, "env_seed", "env", 0);
  } else {
    out["room"] = opt_as<int64_t>(e, "room", "env", 5);
    out["budgets"] = opt_as<std::vector<int64_t>>(e, "budgets", "env", {12, 8, 12});
    out["observe_key_flag"] = opt_as<bool>(e, "observe_key_flag", "env", false);
  }
  return out.dump();
}

DTConfig model_config_from_json(const std::string& model_json, const Env& env,
                                const std::string& objective) {
  json m = parse_json(model_json, "model");
  DTConfig cfg;
  cfg.max_episode_len = env.max_episode_len();
  cfg.state_dim = env.obs_dim();
  cfg.action_space = ActionSpace::discrete(env.n_actions());
  cfg.context_k = opt_as<int64_t>(m, "context_k", "model", env.max_episode_len());
  cfg.gpt.d_model = opt_as<int64_t>(m, "d_model", "model", 128);
  cfg.gpt.n_layers = opt_as<int64_t>(m, "n_layers", "model", 3);
  cfg.gpt.n_heads = opt_as<int64_t>(m, "n_heads", "model", 1);
  cfg.gpt.dropout_rate = opt_as<double>(m, "dropout", "model", 0.1);
  const std::string act = opt_as<std::string>(m, "activation", "model", "gelu");
  if (act != "gelu" && act != "relu") config_fail("model.activation", "must be gelu|relu");
  cfg.gpt.activation = act == "relu" ? Activation::relu : Activation::gelu;
  const std::string norm = opt_as<std::string>(m, "embed_norm", "model", "layer_norm");
  if (norm != "layer_norm" && norm != "tanh")
    config_fail("model.embed_norm", "must be layer_norm|tanh");
  cfg.embed_norm = norm == "tanh" ? EmbedNorm::tanh : EmbedNorm::layer_norm;
  cfg.predict_returns = opt_as<bool>(m, "predict_returns", "model", false);
  cfg.zero_return_inputs = opt_as<bool>(m, "zero_return_inputs", "model", false);
  if (objective != "dt") {
    // return prediction belongs to the return-conditioned objective
    cfg.predict_returns = false;
    cfg.zero_return_inputs = false;
  }
  if (cfg.predict_returns) cfg.return_bins = env.return_support();
  cfg.gpt.max_tokens = 3 * cfg.context_k + (cfg.predict_returns ? 1 : 0);
  try {
    cfg.validate();
  } catch (const std::invalid_argument& ex) {
    config_fail("model", ex.what());
  }
  return cfg;
}

TrainConfig train_config_from_json(const std::string& train_json) {
  json t = parse_json(train_json, "train");
  TrainConfig cfg;
  cfg.steps = opt_as<int64_t>(t, "steps", "train", 10000);
  cfg.batch_size = opt_as<int64_t>(t, "batch_size", "train", 64);
  cfg.learning_rate = opt_as<double>(t, "learning_rate", "train", 1e-4);
  cfg.warmup_steps = opt_as<int64_t>(t, "warmup_steps", "train", 100);
  const std::string decay = opt_as<std::string>(t, "decay", "train", "warmup_cosine");
  if (decay != "warmup_cosine" && decay != "warmup_only")
    config_fail("train.decay", "must be warmup_cosine|warmup_only");
  cfg.decay = decay == "warmup_only" ? DecayMode::warmup_only : DecayMode::warmup_cosine;
  cfg.grad_clip = opt_as<double>(t, "grad_clip", "train", 0.25);
  cfg.weight_decay = opt_as<double>(t, "weight_decay", "train", 1e-4);
  cfg.dropout = opt_as<double>(t, "dropout", "train", 0.1);
  cfg.seed = opt_as<uint64_t>(t, "seed", "train", 0);
  cfg.return_loss_weight = opt_as<double>(t, "return_loss_weight", "train", 1.0);
  try {
    cfg.validate();
  } catch (const std::invalid_argument& ex) {
    config_fail("train", ex.what());
  }
  return cfg;
}

// ----- emitters -----

void emit_histogram(const std::string& csv_path, const std::string& svg_path,
                    const std::vector<std::optional<int64_t>>& random_walk,
                    const std::vector<std::optional<int64_t>>& oracle,
                    const std::vector<std::optional<int64_t>>& model, int64_t horizon,
                    const std::string& config_hash, uint64_t seed) {
  if (model.empty()) throw std::invalid_argument("emit_histogram: empty episode set");
  auto bin_counts = [&](const std::vector<std::optional<int64_t>>& steps) {
    std::vector<double> counts(static_cast<size_t>(horizon + 2), 0.0);  // 0..T plus overflow
    for (const auto& s : steps) {
      if (!s.has_value() || *s > horizon) {
        counts.back() += 1.0;
      } else {
        counts[static_cast<size_t>(*s)] += 1.0;
      }
    }
    return counts;
  };
  const auto cr = bin_counts(random_walk);
  const auto co = bin_counts(oracle);
  const auto cm = bin_counts(model);
  CsvTable t({"bin", "random_walk", "oracle", "model", "random_walk_frac", "oracle_frac",
              "model_frac", "config_hash", "seed"});
  auto frac = [](double c, size_t n) {
    return n == 0 ? 0.0 : c / static_cast<double>(n);
  };
  std::vector<std::string> bins;
  for (int64_t b = 0; b <= horizon + 1; ++b) {
    const std::string label = b <= horizon ? std::to_string(b) : "inf";
    bins.push_back(label);
    t.add_row({label, fmt(cr[static_cast<size_t>(b)]), fmt(co[static_cast<size_t>(b)]),
               fmt(cm[static_cast<size_t>(b)]), fmt(frac(cr[static_cast<size_t>(b)], random_walk.size())),
               fmt(frac(co[static_cast<size_t>(b)], oracle.size())),
               fmt(frac(cm[static_cast<size_t>(b)], model.size())), config_hash,
               std::to_string(seed)});
  }
  t.write(csv_path);
  std::vector<SvgSeries> series;
  auto to_frac = [&](const std::vector<double>& c, size_t n) {
    std::vector<double> f(c.size());
    for (size_t i = 0; i < c.size(); ++i) f[i] = frac(c[i], n);
    return f;
  };
  series.push_back({"random walk", "#888888", to_frac(cr, random_walk.size())});
  series.push_back({"oracle", "#2266cc", to_frac(co, oracle.size())});
  series.push_back({"model", "#cc3322", to_frac(cm, model.size())});
  write_svg_bars(svg_path, "steps to goal", bins, series);
}

std::vector<std::string> emit_return_traces(const std::string& csv_path,
                                            const std::vector<ReturnTraceGroup>& groups,
                                            const std::string& config_hash, uint64_t seed) {
  std::vector<std::string> notes;
  std::vector<const ReturnTraceGroup*> present;
  size_t max_len = 0;
  for (const auto& g : groups) {
    if (g.traces.empty()) {
      notes.push_back("return_traces: group " + g.name + " empty, column omitted");
      continue;
    }
    present.push_back(&g);
    for (const auto& tr : g.traces) max_len = std::max(max_len, tr.size());
  }
  std::vector<std::string> header{"t"};
  for (const auto* g : present) {
    header.push_back(g->name + "_mean");
    header.push_back(g->name + "_n");
  }
  header.push_back("config_hash");
  header.push_back("seed");
  CsvTable t(header);
  for (size_t step = 0; step < max_len; ++step) {
    std::vector<std::string> row{std::to_string(step)};
    for (const auto* g : present) {
      double sum = 0.0;
      int64_t n = 0;
      for (const auto& tr : g->traces) {
        if (step < tr.size()) {
          sum += tr[step];
          n += 1;
        }
      }
      row.push_back(n ? fmt(sum / static_cast<double>(n)) : "nan");
      row.push_back(std::to_string(n));
    }
    row.push_back(config_hash);
    row.push_back(std::to_string(seed));
    t.add_row(std::move(row));
  }
  t.write(csv_path);
  return notes;
}

void emit_attention_trace(const std::string& csv_path,
                          const std::vector<std::vector<double>>& mass,
                          const std::string& config_hash, uint64_t seed) {
  CsvTable t({"target_t", "source_t", "mass", "config_hash", "seed"});
  for (size_t q = 0; q < mass.size(); ++q)
    for (size_t s = 0; s < mass[q].size(); ++s)
      t.add_row({std::to_string(q), std::to_string(s), fmt(mass[q][s]), config_hash,
                 std::to_string(seed)});
  t.write(csv_path);
}

// ----- run_experiment -----

namespace {

double random_policy_success(const Env& proto, int64_t episodes, uint64_t seed) {
  int64_t wins = 0;
  for (int64_t e = 0; e < episodes; ++e) {
    auto env = proto.clone();
    env->reset(split_seed(seed, static_cast<uint64_t>(e)));
    std::mt19937_64 rng(split_seed(seed, static_cast<uint64_t>(e), 1));
    std::uniform_int_distribution<int64_t> pick(0, env->n_actions() - 1);
    while (!env->done()) env->step(pick(rng));
    if (env->task_success()) wins += 1;
  }
  return static_cast<double>(wins) / static_cast<double>(episodes);
}

struct HeldOutEpisode {
  std::vector<std::vector<double>> states;
  std::vector<int64_t> actions;
  std::vector<double> rtg;
  bool success = false;
  bool reached_door = false;
  std::optional<int64_t> key_step;
};

// Random-policy episodes disjoint from the training seed stream,
// stratified over the three outcome groups.
std::vector<HeldOutEpisode> collect_heldout(const Env& proto, int64_t total, uint64_t seed,
                                            std::vector<std::string>* notes) {
  const int64_t per_group = (total + 2) / 3;
  std::vector<HeldOutEpisode> out;
  int64_t n_success = 0, n_nokey = 0, n_nodoor = 0;
  const int64_t max_attempts = std::max<int64_t>(20000, total * 400);
  for (int64_t attempt = 0;
       attempt < max_attempts &&
       (n_success < per_group || n_nokey < per_group || n_nodoor < per_group);
       ++attempt) {
    auto env = proto.clone();
    env->reset(split_seed(seed, static_cast<uint64_t>(attempt), 0x4e1d));
    std::mt19937_64 rng(split_seed(seed, static_cast<uint64_t>(attempt), 0x4e1e));
    std::uniform_int_distribution<int64_t> pick(0, env->n_actions() - 1);
    HeldOutEpisode ep;
    std::vector<double> rewards;
    while (!env->done()) {
      EnvTransition tr = env->step(pick(rng));
      ep.states.push_back(std::move(tr.state));
      ep.actions.push_back(tr.action);
      rewards.push_back(tr.reward);
    }
    ep.rtg = compute_returns_to_go(rewards);
    ep.success = env->task_success();
    if (const auto* k2d = dynamic_cast<const KeyToDoorEnv*>(env.get())) {
      ep.reached_door = k2d->reached_door();
      ep.key_step = k2d->key_pickup_step();
    }
    int64_t* counter = ep.success ? &n_success : (ep.reached_door ? &n_nokey : &n_nodoor);
    if (*counter >= per_group) continue;
    *counter += 1;
    out.push_back(std::move(ep));
  }
  if (notes && (n_success < per_group || n_nokey < per_group || n_nodoor < per_group)) {
    notes->push_back("collect_heldout: group quota not met (success " +
                     std::to_string(n_success) + ", no-key " + std::to_string(n_nokey) +
                     ", no-door " + std::to_string(n_nodoor) + ")");
  }
  return out;
}

struct RunContext {
  const ExperimentConfig* cfg;
  const RunSpec* run;
  size_t run_index;
  const Env* env;
  const TrajectoryDataset* data;
  DTModel* model;  // null for the random objective
  std::string hash;
  fs::path dir;
  CsvTable* summary;
  MetricsBundle* bundle;
};

void add_summary(RunContext& rc, const std::string& metric, double value) {
  rc.summary->add_row({rc.run->name, metric, fmt(value), rc.hash,
                       std::to_string(rc.cfg->seed)});
  rc.bundle->summary[rc.run->name + "/" + metric] = value;
}

void note_file(RunContext& rc, const fs::path& p) { rc.bundle->files.push_back(p.string()); }

void item_success_rate(RunContext& rc, const json& params, uint64_t item_seed) {
  const int64_t episodes = params.value("episodes", 200);
  const double target = params.value("target_return", 1.0);
  double rate;
  if (!rc.model) {
    rate = random_policy_success(*rc.env, episodes, item_seed);
  } else {
    const TokenLayout layout = rc.run->layout == "bc" ? TokenLayout::bc : TokenLayout::dt;
    rate = success_rate(*rc.model, *rc.env, episodes, target, item_seed, layout);
  }
  CsvTable t({"run", "episodes", "target_return", "success_rate", "config_hash", "seed"});
  t.add_row({rc.run->name, std::to_string(episodes), fmt(target), fmt(rate), rc.hash,
             std::to_string(item_seed)});
  const fs::path p = rc.dir / (rc.run->name + "_success.csv");
  t.write(p.string());
  note_file(rc, p);
  add_summary(rc, "success_rate", rate);
}

void item_sweep(RunContext& rc, const json& params, uint64_t item_seed) {
  if (!rc.model || rc.run->layout != "dt") {
    rc.bundle->notes.push_back("sweep skipped for run " + rc.run->name +
                               " (needs a return-conditioned model)");
    return;
  }
  const auto targets = params.at("targets").get<std::vector<double>>();
  const int64_t per_target = params.value("episodes_per_target", 50);
  auto rows = target_return_sweep(*rc.model, *rc.env, targets, per_target, item_seed);
  CsvTable t({"target", "mean_achieved", "std_achieved", "episodes", "config_hash", "seed"});
  std::vector<double> xs, ys;
  for (const auto& r : rows) {
    t.add_row({fmt(r.target), fmt(r.mean_achieved), fmt(r.std_achieved),
               std::to_string(r.episodes), rc.hash, std::to_string(item_seed)});
    xs.push_back(r.target);
    ys.push_back(r.mean_achieved);
  }
  const fs::path p = rc.dir / (rc.run->name + "_sweep.csv");
  t.write(p.string());
  note_file(rc, p);
  const fs::path svg = rc.dir / (rc.run->name + "_sweep.svg");
  write_svg_lines(svg.string(), "target vs achieved return", xs,
                  {{"achieved", "#cc3322", ys}, {"oracle", "#888888", xs}});
  note_file(rc, svg);
  add_summary(rc, "sweep_pearson", pearson_correlation(xs, ys));
  int64_t inversions = 0;
  for (size_t i = 1; i < ys.size(); ++i)
    if (ys[i] < ys[i - 1]) inversions += 1;
  add_summary(rc, "sweep_inversions", static_cast<double>(inversions));
}

void item_prior_rollouts(RunContext& rc, const json& params, uint64_t item_seed) {
  const auto* graph = dynamic_cast<const GraphEnv*>(rc.env);
  if (!graph || !rc.model || !rc.model->config().predict_returns) {
    rc.bundle->notes.push_back("prior_rollouts skipped for run " + rc.run->name +
                               " (needs the graph env and a return head)");
    return;
  }
  const int64_t per_start = params.value("episodes_per_start", 10);
  const double gamma = params.value("gamma", 10.0);
  ReturnPrior prior = ReturnPrior::shortest_path(graph->max_episode_len(), gamma);
  CsvTable t({"start", "oracle_len", "steps", "reached", "label", "config_hash", "seed"});
  std::vector<std::optional<int64_t>> model_steps, oracle_steps, walk_steps;
  int64_t reached = 0, contained = 0, stitched = 0;
  double model_len_sum = 0.0, oracle_len_sum = 0.0;
  int64_t success_n = 0;
  const auto starts = graph->reachable_starts();
  int64_t episode_index = 0;
  for (int64_t start : starts) {
    const int64_t oracle = *graph->shortest_path_oracle(start);
    for (int64_t e = 0; e < per_start; ++e, ++episode_index) {
      auto env = graph->clone();
      static_cast<GraphEnv*>(env.get())->reset_at(start);
      RolloutConfig rcfg;
      rcfg.seed = split_seed(item_seed, static_cast<uint64_t>(episode_index));
      EpisodeRecord ep = rollout_with_return_prior(*rc.model, *env, prior, rcfg);
      StitchLabel label = stitching_analysis(ep, *rc.data);
      std::string label_s = label == StitchLabel::failed
                                ? "failed"
                                : (label == StitchLabel::contained ? "contained" : "stitched");
      if (ep.success) {
        reached += 1;
        model_len_sum += static_cast<double>(ep.steps);
        oracle_len_sum += static_cast<double>(oracle);
        success_n += 1;
        model_steps.push_back(ep.steps);
        if (label == StitchLabel::contained) contained += 1;
        if (label == StitchLabel::stitched) stitched += 1;
      } else {
        model_steps.push_back(std::nullopt);
      }
      oracle_steps.push_back(oracle);
      t.add_row({std::to_string(start), std::to_string(oracle),
                 ep.success ? std::to_string(ep.steps) : "inf", ep.success ? "1" : "0", label_s,
                 rc.hash, std::to_string(item_seed)});
    }
  }
  for (const auto& traj : rc.data->trajectories()) {
    const bool traj_reached = !traj.rewards.empty() && traj.rewards.back() == 0.0;
    walk_steps.push_back(traj_reached ? std::optional<int64_t>(traj.length()) : std::nullopt);
  }
  const fs::path p = rc.dir / (rc.run->name + "_prior_episodes.csv");
  t.write(p.string());
  note_file(rc, p);
  const fs::path hist_csv = rc.dir / (rc.run->name + "_histogram.csv");
  const fs::path hist_svg = rc.dir / (rc.run->name + "_histogram.svg");
  emit_histogram(hist_csv.string(), hist_svg.string(), walk_steps, oracle_steps, model_steps,
                 graph->max_episode_len(), rc.hash, item_seed);
  note_file(rc, hist_csv);
  note_file(rc, hist_svg);
  const double n_eps = static_cast<double>(model_steps.size());
  add_summary(rc, "prior_reach_rate", static_cast<double>(reached) / n_eps);
  add_summary(rc, "prior_mean_model_len",
              success_n ? model_len_sum / static_cast<double>(success_n) : 0.0);
  add_summary(rc, "prior_mean_oracle_len",
              success_n ? oracle_len_sum / static_cast<double>(success_n) : 0.0);
  add_summary(rc, "prior_stitched_fraction",
              reached ? static_cast<double>(stitched) / static_cast<double>(reached) : 0.0);
  add_summary(rc, "prior_contained_fraction",
              reached ? static_cast<double>(contained) / static_cast<double>(reached) : 0.0);
}

void item_return_traces(RunContext& rc, const json& params, uint64_t item_seed) {
  if (!rc.model || !rc.model->config().predict_returns) {
    rc.bundle->notes.push_back("return_traces skipped for run " + rc.run->name +
                               " (needs a return head)");
    return;
  }
  const int64_t episodes = params.value("episodes", 100);
  auto heldout = collect_heldout(*rc.env, episodes, item_seed, &rc.bundle->notes);
  const int64_t bin1 = rc.model->config().bin_of_return(1.0);
  ReturnTraceGroup g_success{"success", {}}, g_nokey{"door_no_key", {}},
      g_nodoor{"never_door", {}};
  double final_success = 0.0, final_nokey = 0.0;
  int64_t n_final_success = 0, n_final_nokey = 0;
  for (const auto& ep : heldout) {
    auto trace = return_probability_trace(*rc.model, ep.states, ep.actions, ep.rtg, bin1);
    if (ep.success) {
      final_success += trace.back();
      n_final_success += 1;
      g_success.traces.push_back(std::move(trace));
    } else if (ep.reached_door) {
      final_nokey += trace.back();
      n_final_nokey += 1;
      g_nokey.traces.push_back(std::move(trace));
    } else {
      g_nodoor.traces.push_back(std::move(trace));
    }
  }
  const fs::path p = rc.dir / (rc.run->name + "_return_traces.csv");
  auto notes = emit_return_traces(p.string(), {g_success, g_nokey, g_nodoor}, rc.hash, item_seed);
  for (auto& n : notes) rc.bundle->notes.push_back(std::move(n));
  note_file(rc, p);
  if (n_final_success)
    add_summary(rc, "trace_final_p_success",
                final_success / static_cast<double>(n_final_success));
  if (n_final_nokey)
    add_summary(rc, "trace_final_p_door_no_key",
                final_nokey / static_cast<double>(n_final_nokey));
}

void item_attention_trace(RunContext& rc, const json& params, uint64_t item_seed) {
  if (!rc.model || !rc.model->config().predict_returns) {
    rc.bundle->notes.push_back("attention_trace skipped for run " + rc.run->name +
                               " (needs a return head)");
    return;
  }
  const int64_t episodes = params.value("episodes", 100);
  auto heldout = collect_heldout(*rc.env, episodes, split_seed(item_seed, 0xa77e), nullptr);
  CsvTable summary_t({"episode", "length", "key_pickup_step", "pickup_mass", "uniform_baseline",
                      "exceeds", "config_hash", "seed"});
  int64_t n_success = 0, n_exceeds = 0;
  bool wrote_example = false;
  int64_t idx = 0;
  for (const auto& ep : heldout) {
    if (!ep.success || !ep.key_step.has_value()) continue;
    const int64_t L = static_cast<int64_t>(ep.states.size());
    WindowBatch wb;
    wb.batch = 1;
    wb.context = L;
    wb.state_dim = rc.model->config().state_dim;
    wb.returns_to_go = ep.rtg;
    wb.actions = ep.actions;
    wb.valid.assign(static_cast<size_t>(L), 1);
    wb.timesteps.resize(static_cast<size_t>(L));
    wb.states.resize(static_cast<size_t>(L * wb.state_dim));
    for (int64_t i = 0; i < L; ++i) {
      wb.timesteps[static_cast<size_t>(i)] = i;
      std::copy(ep.states[static_cast<size_t>(i)].begin(), ep.states[static_cast<size_t>(i)].end(),
                wb.states.begin() + i * wb.state_dim);
    }
    AttentionTrace trace;
    DTForwardOptions fopts;
    fopts.trace = &trace;
    rc.model->forward(wb, fopts);
    auto mass = aggregate_attention_by_timestep(trace, rc.model->config(), L);
    std::vector<double> profile(static_cast<size_t>(L), 0.0);
    for (const auto& row : mass)
      for (size_t s = 0; s < row.size(); ++s) profile[s] += row[s];
    for (double& v : profile) v /= static_cast<double>(L);
    const double pickup_mass = profile[static_cast<size_t>(*ep.key_step)];
    const double uniform = 1.0 / static_cast<double>(L);
    n_success += 1;
    if (pickup_mass > uniform) n_exceeds += 1;
    summary_t.add_row({std::to_string(idx), std::to_string(L), std::to_string(*ep.key_step),
                       fmt(pickup_mass), fmt(uniform), pickup_mass > uniform ? "1" : "0", rc.hash,
                       std::to_string(item_seed)});
    if (!wrote_example) {
      const fs::path p = rc.dir / (rc.run->name + "_attention_trace.csv");
      emit_attention_trace(p.string(), mass, rc.hash, item_seed);
      note_file(rc, p);
      wrote_example = true;
    }
    idx += 1;
  }
  const fs::path p = rc.dir / (rc.run->name + "_attention_summary.csv");
  summary_t.write(p.string());
  note_file(rc, p);
  if (n_success)
    add_summary(rc, "attention_pickup_exceeds_uniform_frac",
                static_cast<double>(n_exceeds) / static_cast<double>(n_success));
}

}  // namespace

MetricsBundle run_experiment(const ExperimentConfig& cfg) {
  MetricsBundle bundle;
  bundle.output_dir = cfg.output_dir;
  bundle.config_hash = fnv1a_hex(cfg.canonical);
  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir);

  auto env = make_env(cfg.env_json);
  const std::string env_canonical = canonical_env_config(cfg.env_json);
  json env_j = json::parse(cfg.env_json);
  const std::string env_kind = env_j.at("kind").get<std::string>();

  // dataset stage
  json dj = parse_json(cfg.dataset_json, "dataset");
  const std::string source = opt_as<std::string>(dj, "source", "dataset", "generate");
  TrajectoryDataset data;
  if (source == "generate") {
    const int64_t count = req_as<int64_t>(dj, "count", "dataset");
    const uint64_t dseed = opt_as<uint64_t>(dj, "seed", "dataset", split_seed(cfg.seed, 0xda));
    data = TrajectoryDataset::collect_random(*env, count, dseed);
    data.manifest.env_kind = env_kind;
    data.manifest.env_config = env_canonical;
    if (opt_as<bool>(dj, "delayed", "dataset", false)) data = data.with_delayed_returns();
    const fs::path dpath = dir / "dataset.djsonl";
    data.save(dpath.string());
    bundle.files.push_back(dpath.string());
  } else if (source == "load") {
    const std::string path = req_as<std::string>(dj, "path", "dataset");
    data = TrajectoryDataset::load(path);
    if (data.manifest.env_kind != env_kind || data.manifest.env_config != env_canonical) {
      throw std::runtime_error("dataset " + path + " was generated for env " +
                               data.manifest.env_kind + " " + data.manifest.env_config +
                               ", experiment expects " + env_kind + " " + env_canonical);
    }
    if (opt_as<bool>(dj, "delayed", "dataset", false) && !data.manifest.delayed)
      data = data.with_delayed_returns();
  } else {
    config_fail("dataset.source", "must be generate|load");
  }

  CsvTable summary({"run", "metric", "value", "config_hash", "seed"});

  for (size_t ri = 0; ri < cfg.runs.size(); ++ri) {
    const RunSpec& run = cfg.runs[ri];
    // per-run dataset filter
    const TrajectoryDataset* run_data = &data;
    std::optional<TrajectoryDataset> filtered;
    if (!run.filter_json.empty()) {
      json f = parse_json(run.filter_json, "runs." + run.name + ".filter");
      const std::string mode = req_as<std::string>(f, "mode", "runs." + run.name + ".filter");
      if (mode == "top_percent") {
        filtered = data.filter_top_percentile(
            req_as<double>(f, "x", "runs." + run.name + ".filter"));
      } else if (mode == "min_return") {
        filtered = data.filter_min_return(
            req_as<double>(f, "threshold", "runs." + run.name + ".filter"));
      } else {
        config_fail("runs." + run.name + ".filter.mode", "must be top_percent|min_return");
      }
      if (filtered->size() == 0)
        throw std::runtime_error("run " + run.name + ": dataset filter kept no episodes");
      run_data = &*filtered;
    }

    std::optional<DTModel> model;
    if (run.objective == "pretrained") {
      model.emplace(DTModel::load_checkpoint(run.checkpoint));
      if (model->config().state_dim != env->obs_dim())
        throw std::runtime_error("checkpoint " + run.checkpoint + " has state_dim " +
                                 std::to_string(model->config().state_dim) +
                                 ", env produces " + std::to_string(env->obs_dim()));
    } else if (run.objective != "random") {
      const std::string model_json =
          merge_shallow(json::parse(cfg.model_json),
                        run.model_override.empty() ? json::object()
                                                   : json::parse(run.model_override))
              .dump();
      DTConfig mc = model_config_from_json(model_json, *env, run.objective);
      model.emplace(mc, split_seed(cfg.seed, 0x10d, ri));
      const std::string train_json =
          merge_shallow(json::parse(cfg.train_json),
                        run.train_override.empty() ? json::object()
                                                   : json::parse(run.train_override))
              .dump();
      TrainConfig tc = train_config_from_json(train_json);
      if (tc.seed == 0) tc.seed = split_seed(cfg.seed, 0x7a1, ri);
      tc.objective = run.objective == "bc" ? Objective::bc : Objective::dt;
      TrainLog log = train(*model, *run_data, tc);
      CsvTable lt({"step", "loss", "action_loss", "return_loss", "lr", "grad_norm",
                   "config_hash", "seed"});
      for (const auto& row : log.rows) {
        lt.add_row({std::to_string(row.step), fmt(row.loss), fmt(row.action_loss),
                    fmt(row.return_loss), fmt(row.lr), fmt(row.grad_norm), bundle.config_hash,
                    std::to_string(tc.seed)});
      }
      const fs::path lp = dir / (run.name + "_train_log.csv");
      lt.write(lp.string());
      bundle.files.push_back(lp.string());
      const fs::path cp = dir / (run.name + "_checkpoint.json");
      model->save_checkpoint(cp.string());
      bundle.files.push_back(cp.string());
      bundle.summary[run.name + "/final_loss"] = log.rows.back().loss;
      bundle.summary[run.name + "/train_seconds"] = log.wall_seconds;
    }

    RunContext rc{&cfg,          &run, ri, env.get(), run_data, model ? &*model : nullptr,
                  bundle.config_hash, dir,  &summary, &bundle};
    for (size_t pi = 0; pi < cfg.plan.size(); ++pi) {
      const PlanItem& item = cfg.plan[pi];
      if (!item.runs.empty() &&
          std::find(item.runs.begin(), item.runs.end(), run.name) == item.runs.end())
        continue;
      const uint64_t item_seed = split_seed(cfg.eval_seed, ri, pi);
      json params = json::parse(item.params_json);
      if (item.type == "success_rate") {
        item_success_rate(rc, params, item_seed);
      } else if (item.type == "sweep") {
        item_sweep(rc, params, item_seed);
      } else if (item.type == "prior_rollouts") {
        item_prior_rollouts(rc, params, item_seed);
      } else if (item.type == "return_traces") {
        item_return_traces(rc, params, item_seed);
      } else if (item.type == "attention_trace") {
        item_attention_trace(rc, params, item_seed);
      }
    }
  }

  const fs::path sp = dir / "summary.csv";
  summary.write(sp.string());
  bundle.files.push_back(sp.string());

  json meta;
  meta["name"] = cfg.name;
  meta["config_hash"] = bundle.config_hash;
  meta["seed"] = cfg.seed;
  meta["eval_seed"] = cfg.eval_seed;
  meta["notes"] = bundle.notes;
  meta["config"] = json::parse(cfg.canonical);
  std::ofstream mf((dir / "run.json").string(), std::ios::binary);
  mf << meta.dump(2) << '\n';
  bundle.files.push_back((dir / "run.json").string());
  return bundle;
}

}  // namespace dtlab
