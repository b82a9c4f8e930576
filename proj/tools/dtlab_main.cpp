// Command-line front end: gen-data, train, eval, sweep, analyze, run.
// Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <optional>

#include "dtlab/dataset.hpp"
#include "dtlab/eval.hpp"
#include "dtlab/experiment.hpp"
#include "dtlab/report.hpp"
#include "dtlab/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dtlab;

namespace {

// dotted-path override, e.g. --set train.steps=2000
void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("--set expects key.path=value, got " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  json* node = &doc;
  size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty()) throw ConfigError("--set: empty key in " + path);
    if (dot == std::string::npos) {
      json parsed;
      try {
        parsed = json::parse(value);
      } catch (const json::exception&) {
        parsed = value;  // plain string
      }
      (*node)[key] = parsed;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

std::unique_ptr<Env> env_from_dataset(const TrajectoryDataset& ds) {
  json e = json::parse(ds.manifest.env_config);
  e["kind"] = ds.manifest.env_kind;
  return make_env(e.dump());
}

struct GenDataArgs {
  std::string env_kind = "graph";
  int64_t n_nodes = 20;
  double sparsity = 0.1;
  int64_t max_steps = 10;
  int64_t room = 5;
  std::vector<int64_t> budgets = {12, 8, 12};
  bool observe_key_flag = false;
  uint64_t env_seed = 0;
  int64_t count = 1000;
  uint64_t seed = 0;
  bool delayed = false;
  std::string out = "dataset.djsonl";
};

int cmd_gen_data(const GenDataArgs& a) {
  json e;
  e["kind"] = a.env_kind;
  if (a.env_kind == "graph") {
    e["n_nodes"] = a.n_nodes;
    e["sparsity"] = a.sparsity;
    e["max_steps"] = a.max_steps;
    e["env_seed"] = a.env_seed;
  } else {
    e["room"] = a.room;
    e["budgets"] = a.budgets;
    e["observe_key_flag"] = a.observe_key_flag;
  }
  auto env = make_env(e.dump());
  TrajectoryDataset ds = TrajectoryDataset::collect_random(*env, a.count, a.seed);
  ds.manifest.env_kind = a.env_kind;
  ds.manifest.env_config = canonical_env_config(e.dump());
  if (a.delayed) ds = ds.with_delayed_returns();
  ds.save(a.out);
  std::cout << "wrote " << ds.size() << " trajectories (" << ds.total_timesteps()
            << " timesteps) to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string dataset;
  std::string out = "checkpoint.json";
  std::string log_out;
  std::string objective = "dt";
  std::string model_json = "{}";
  std::string train_json = "{}";
  uint64_t init_seed = 1;
};

int cmd_train(const TrainArgs& a) {
  TrajectoryDataset ds = TrajectoryDataset::load(a.dataset);
  auto env = env_from_dataset(ds);
  DTConfig mc = model_config_from_json(a.model_json, *env, a.objective);
  DTModel model(mc, a.init_seed);
  TrainConfig tc = train_config_from_json(a.train_json);
  tc.objective = a.objective == "bc" ? Objective::bc : Objective::dt;
  TrainLog log = train(model, ds, tc);
  model.save_checkpoint(a.out);
  if (!a.log_out.empty()) {
    CsvTable t({"step", "loss", "action_loss", "return_loss", "lr", "grad_norm"});
    for (const auto& r : log.rows)
      t.add_row({std::to_string(r.step), format_number(r.loss), format_number(r.action_loss),
                 format_number(r.return_loss), format_number(r.lr), format_number(r.grad_norm)});
    t.write(a.log_out);
  }
  std::cout << "trained " << log.rows.size() << " steps in " << format_number(log.wall_seconds)
            << "s, final loss " << format_number(log.rows.back().loss) << ", checkpoint " << a.out
            << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string dataset;
  std::string layout = "dt";
  int64_t episodes = 200;
  double target_return = 1.0;
  uint64_t seed = 0;
  std::string out;
};

int cmd_eval(const EvalArgs& a) {
  DTModel model = DTModel::load_checkpoint(a.checkpoint);
  TrajectoryDataset ds = TrajectoryDataset::load(a.dataset);
  auto env = env_from_dataset(ds);
  const double rate =
      success_rate(model, *env, a.episodes, a.target_return, a.seed,
                   a.layout == "bc" ? TokenLayout::bc : TokenLayout::dt);
  std::cout << "success_rate " << format_number(rate) << " over " << a.episodes
            << " episodes (target " << format_number(a.target_return) << ")\n";
  if (!a.out.empty()) {
    CsvTable t({"episodes", "target_return", "success_rate", "seed"});
    t.add_row({std::to_string(a.episodes), format_number(a.target_return), format_number(rate),
               std::to_string(a.seed)});
    t.write(a.out);
  }
  return 0;
}

struct SweepArgs {
  std::string checkpoint;
  std::string dataset;
  std::vector<double> targets;
  int64_t episodes_per_target = 50;
  uint64_t seed = 0;
  std::string out = "sweep.csv";
};

int cmd_sweep(const SweepArgs& a) {
  DTModel model = DTModel::load_checkpoint(a.checkpoint);
  TrajectoryDataset ds = TrajectoryDataset::load(a.dataset);
  auto env = env_from_dataset(ds);
  auto rows = target_return_sweep(model, *env, a.targets, a.episodes_per_target, a.seed);
  CsvTable t({"target", "mean_achieved", "std_achieved", "episodes", "seed"});
  std::vector<double> xs, ys;
  for (const auto& r : rows) {
    t.add_row({format_number(r.target), format_number(r.mean_achieved),
               format_number(r.std_achieved), std::to_string(r.episodes),
               std::to_string(a.seed)});
    xs.push_back(r.target);
    ys.push_back(r.mean_achieved);
  }
  t.write(a.out);
  std::cout << "sweep over " << rows.size() << " targets, Pearson "
            << format_number(pearson_correlation(xs, ys)) << ", wrote " << a.out << "\n";
  return 0;
}

struct AnalyzeArgs {
  std::string checkpoint;
  std::string dataset;
  std::string kind = "prior";  // prior | traces
  std::string out_dir = "analysis";
  uint64_t seed = 0;
  int64_t episodes = 100;
  int64_t episodes_per_start = 10;
  double gamma = 10.0;
};

int cmd_analyze(const AnalyzeArgs& a) {
  TrajectoryDataset ds = TrajectoryDataset::load(a.dataset);
  json env_j = json::parse(ds.manifest.env_config);
  env_j["kind"] = ds.manifest.env_kind;

  json cfg;
  cfg["name"] = "analyze-" + a.kind;
  cfg["seed"] = a.seed;
  cfg["output_dir"] = a.out_dir;
  cfg["env"] = env_j;
  cfg["dataset"] = {{"source", "load"}, {"path", a.dataset}};
  cfg["runs"] = json::array(
      {{{"name", "model"}, {"objective", "pretrained"}, {"checkpoint", a.checkpoint}}});
  json plan = json::array();
  if (a.kind == "prior") {
    plan.push_back({{"type", "prior_rollouts"},
                    {"episodes_per_start", a.episodes_per_start},
                    {"gamma", a.gamma}});
  } else if (a.kind == "traces") {
    plan.push_back({{"type", "return_traces"}, {"episodes", a.episodes}});
    plan.push_back({{"type", "attention_trace"}, {"episodes", a.episodes}});
  } else {
    throw ConfigError("analyze: --kind must be prior|traces");
  }
  cfg["eval"] = {{"seed", a.seed + 1}, {"plan", plan}};
  MetricsBundle bundle = run_experiment(parse_experiment_config(cfg.dump()));
  for (const auto& [k, v] : bundle.summary)
    std::cout << k << " = " << format_number(v) << "\n";
  std::cout << "analysis written to " << bundle.output_dir << "\n";
  return 0;
}

struct RunArgs {
  std::string config;
  std::string output_dir;
  std::optional<uint64_t> seed;
  std::vector<std::string> overrides;
};

int cmd_run(const RunArgs& a) {
  std::ifstream in(a.config, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open " + a.config);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError("config: " + a.config + " is not valid JSON: " + e.what());
  }
  // flags take precedence over the config file
  for (const auto& o : a.overrides) apply_override(doc, o);
  if (!a.output_dir.empty()) doc["output_dir"] = a.output_dir;
  if (a.seed) doc["seed"] = *a.seed;
  MetricsBundle bundle = run_experiment(parse_experiment_config(doc.dump()));
  for (const auto& [k, v] : bundle.summary)
    std::cout << k << " = " << format_number(v) << "\n";
  for (const auto& n : bundle.notes) std::cout << "note: " << n << "\n";
  std::cout << "outputs in " << bundle.output_dir << " (config hash " << bundle.config_hash
            << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Return-conditioned trajectory modeling workbench"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* cgen = app.add_subcommand("gen-data", "Collect random-policy trajectories");
  cgen->add_option("--env", gen.env_kind, "graph | key_to_door")->required();
  cgen->add_option("--n-nodes", gen.n_nodes);
  cgen->add_option("--sparsity", gen.sparsity);
  cgen->add_option("--max-steps", gen.max_steps);
  cgen->add_option("--env-seed", gen.env_seed);
  cgen->add_option("--room", gen.room);
  cgen->add_option("--budgets", gen.budgets)->expected(3);
  cgen->add_flag("--observe-key-flag", gen.observe_key_flag);
  cgen->add_option("--count", gen.count);
  cgen->add_option("--seed", gen.seed);
  cgen->add_flag("--delayed", gen.delayed);
  cgen->add_option("--out", gen.out);

  TrainArgs tr;
  auto* ctrain = app.add_subcommand("train", "Train a model on a dataset");
  ctrain->add_option("--dataset", tr.dataset)->required();
  ctrain->add_option("--out", tr.out);
  ctrain->add_option("--log-out", tr.log_out);
  ctrain->add_option("--objective", tr.objective, "dt | bc");
  ctrain->add_option("--model", tr.model_json, "model config JSON");
  ctrain->add_option("--train", tr.train_json, "train config JSON");
  ctrain->add_option("--init-seed", tr.init_seed);

  EvalArgs ev;
  auto* ceval = app.add_subcommand("eval", "Success-rate evaluation of a checkpoint");
  ceval->add_option("--checkpoint", ev.checkpoint)->required();
  ceval->add_option("--dataset", ev.dataset, "dataset whose manifest defines the env")->required();
  ceval->add_option("--layout", ev.layout, "dt | bc");
  ceval->add_option("--episodes", ev.episodes);
  ceval->add_option("--target-return", ev.target_return);
  ceval->add_option("--seed", ev.seed);
  ceval->add_option("--out", ev.out);

  SweepArgs sw;
  auto* csweep = app.add_subcommand("sweep", "Target-return sweep");
  csweep->add_option("--checkpoint", sw.checkpoint)->required();
  csweep->add_option("--dataset", sw.dataset)->required();
  csweep->add_option("--targets", sw.targets)->required();
  csweep->add_option("--episodes-per-target", sw.episodes_per_target);
  csweep->add_option("--seed", sw.seed);
  csweep->add_option("--out", sw.out);

  AnalyzeArgs an;
  auto* canalyze = app.add_subcommand("analyze", "Prior rollouts / critic trace analyses");
  canalyze->add_option("--checkpoint", an.checkpoint)->required();
  canalyze->add_option("--dataset", an.dataset)->required();
  canalyze->add_option("--kind", an.kind, "prior | traces");
  canalyze->add_option("--out-dir", an.out_dir);
  canalyze->add_option("--seed", an.seed);
  canalyze->add_option("--episodes", an.episodes);
  canalyze->add_option("--episodes-per-start", an.episodes_per_start);
  canalyze->add_option("--gamma", an.gamma);

  RunArgs run;
  auto* crun = app.add_subcommand("run", "Full configured experiment pipeline");
  crun->add_option("--config", run.config)->required();
  crun->add_option("--output-dir", run.output_dir);
  uint64_t seed_flag = 0;
  auto* seed_opt = crun->add_option("--seed", seed_flag);
  crun->add_option("--set", run.overrides, "dotted-path config override, key.path=value");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*cgen) return cmd_gen_data(gen);
    if (*ctrain) return cmd_train(tr);
    if (*ceval) return cmd_eval(ev);
    if (*csweep) return cmd_sweep(sw);
    if (*canalyze) return cmd_analyze(an);
    if (*crun) {
      if (*seed_opt) run.seed = seed_flag;
      return cmd_run(run);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
