#include "dtlab/dt_model.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace dtlab {

using nlohmann::json;

void DTConfig::validate() const {
  if (context_k < 1) throw std::invalid_argument("DTConfig: context_k must be positive");
  if (max_episode_len < 1)
    throw std::invalid_argument("DTConfig: max_episode_len must be positive");
  if (state_dim < 1) throw std::invalid_argument("DTConfig: state_dim must be positive");
  if (action_space.head_width() < 1)
    throw std::invalid_argument("DTConfig: empty action space");
  gpt.validate();
  const int64_t need = 3 * context_k + (predict_returns ? 1 : 0);
  if (gpt.max_tokens < need) {
    throw std::invalid_argument("DTConfig: gpt.max_tokens " + std::to_string(gpt.max_tokens) +
                                " below required " + std::to_string(need) + " (3*K" +
                                (predict_returns ? "+1" : "") + ")");
  }
  if (predict_returns && return_bins.empty())
    throw std::invalid_argument("DTConfig: predict_returns needs return_bins");
  for (size_t i = 1; i < return_bins.size(); ++i)
    if (return_bins[i] <= return_bins[i - 1])
      throw std::invalid_argument("DTConfig: return_bins must be strictly ascending");
}

int64_t DTConfig::bin_of_return(double r) const {
  for (size_t i = 0; i < return_bins.size(); ++i)
    if (std::abs(return_bins[i] - r) < 1e-9) return static_cast<int64_t>(i);
  throw std::invalid_argument("DTConfig: return value " + std::to_string(r) +
                              " outside the configured bin support");
}

DTModel::DTModel(DTConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(init_seed);
  const int64_t d = cfg_.gpt.d_model;
  w_.w_embed_R = Tensor::randn({1, d}, rng, 0.02);
  w_.b_embed_R = Tensor({d});
  w_.w_embed_s = Tensor::randn({cfg_.state_dim, d}, rng, 0.02);
  w_.b_embed_s = Tensor({d});
  if (cfg_.action_space.is_discrete()) {
    w_.embed_a_table = Tensor::randn({cfg_.action_space.n, d}, rng, 0.02);
  } else {
    w_.w_embed_a = Tensor::randn({cfg_.action_space.dim, d}, rng, 0.02);
    w_.b_embed_a = Tensor({d});
  }
  w_.embed_t = Tensor::randn({cfg_.max_episode_len, d}, rng, 0.02);
  if (cfg_.embed_norm == EmbedNorm::layer_norm) {
    w_.embed_ln_g = Tensor::full({d}, 1.0);
    w_.embed_ln_b = Tensor({d});
  }
  if (cfg_.predict_returns) w_.start_token = Tensor::randn({1, d}, rng, 0.02);
  w_.gpt = GPTWeights::init(cfg_.gpt, rng);
  w_.w_pred_a = Tensor::randn({d, cfg_.action_space.head_width()}, rng, 0.02);
  w_.b_pred_a = Tensor({cfg_.action_space.head_width()});
  if (cfg_.predict_returns) {
    w_.w_pred_R = Tensor::randn({d, static_cast<int64_t>(cfg_.return_bins.size())}, rng, 0.02);
    w_.b_pred_R = Tensor({static_cast<int64_t>(cfg_.return_bins.size())});
  }

  params_.add("embed_R.w", w_.w_embed_R);
  params_.add("embed_R.b", w_.b_embed_R);
  params_.add("embed_s.w", w_.w_embed_s);
  params_.add("embed_s.b", w_.b_embed_s);
  if (cfg_.action_space.is_discrete()) {
    params_.add("embed_a.table", w_.embed_a_table);
  } else {
    params_.add("embed_a.w", w_.w_embed_a);
    params_.add("embed_a.b", w_.b_embed_a);
  }
  params_.add("embed_t.table", w_.embed_t);
  if (cfg_.embed_norm == EmbedNorm::layer_norm) {
    params_.add("embed_ln.g", w_.embed_ln_g);
    params_.add("embed_ln.b", w_.embed_ln_b);
  }
  if (cfg_.predict_returns) params_.add("start_token", w_.start_token);
  w_.gpt.register_params(params_, "gpt.");
  params_.add("pred_a.w", w_.w_pred_a);
  params_.add("pred_a.b", w_.b_pred_a);
  if (cfg_.predict_returns) {
    params_.add("pred_R.w", w_.w_pred_R);
    params_.add("pred_R.b", w_.b_pred_R);
  }
}

Tensor DTModel::apply_embed_norm(const Tensor& tokens) const {
  if (cfg_.embed_norm == EmbedNorm::layer_norm)
    return layer_norm(tokens, w_.embed_ln_g, w_.embed_ln_b);
  return tanh_act(tokens);
}

// Interleaved token matrix for the whole batch, [B*T x d]; fills
// key_valid (per flat token) when requested.
Tensor DTModel::assemble_tokens(const WindowBatch& wb, TokenLayout layout,
                                std::vector<uint8_t>* key_valid) const {
  wb.validate();
  if (wb.state_dim != cfg_.state_dim)
    throw std::invalid_argument("DTModel: window state_dim " + std::to_string(wb.state_dim) +
                                " vs config " + std::to_string(cfg_.state_dim));
  const int64_t B = wb.batch, K = wb.context;
  const int64_t slots = B * K;
  for (int64_t s = 0; s < slots; ++s) {
    if (wb.valid[static_cast<size_t>(s)] &&
        wb.timesteps[static_cast<size_t>(s)] >= cfg_.max_episode_len)
      throw std::invalid_argument("DTModel: timestep " +
                                  std::to_string(wb.timesteps[static_cast<size_t>(s)]) +
                                  " outside embedding table of length " +
                                  std::to_string(cfg_.max_episode_len));
  }
  const int64_t tps = cfg_.tokens_per_step(layout);
  const int64_t base = cfg_.start_offset(layout);
  const int64_t T = base + tps * K;

  Tensor t_emb = gather_rows(w_.embed_t, wb.timesteps);
  Tensor s_emb = add_rowvec(matmul(Tensor({slots, cfg_.state_dim}, wb.states), w_.w_embed_s),
                            w_.b_embed_s);
  s_emb = add(s_emb, t_emb);
  Tensor a_emb;
  if (cfg_.action_space.is_discrete()) {
    a_emb = gather_rows(w_.embed_a_table, wb.actions);
  } else {
    a_emb = add_rowvec(
        matmul(Tensor({slots, cfg_.action_space.dim}, wb.actions_cont), w_.w_embed_a),
        w_.b_embed_a);
  }
  a_emb = add(a_emb, t_emb);

  std::vector<Tensor> modalities;
  if (layout == TokenLayout::dt) {
    std::vector<double> rtg_in = wb.returns_to_go;
    if (cfg_.zero_return_inputs) std::fill(rtg_in.begin(), rtg_in.end(), 0.0);
    Tensor r_emb =
        add_rowvec(matmul(Tensor({slots, 1}, std::move(rtg_in)), w_.w_embed_R), w_.b_embed_R);
    r_emb = add(r_emb, t_emb);
    modalities = {r_emb, s_emb, a_emb};
  } else {
    modalities = {s_emb, a_emb};
  }
  Tensor stacked = concat_rows(modalities);
  // interleave: token (b, step i, modality m) <- stacked row m*B*K + b*K + i
  std::vector<int64_t> perm(static_cast<size_t>(B * tps * K));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < K; ++i)
      for (int64_t m = 0; m < tps; ++m)
        perm[static_cast<size_t>(b * tps * K + i * tps + m)] = m * slots + b * K + i;
  Tensor tokens = gather_rows(stacked, perm);
  tokens = apply_embed_norm(tokens);
  std::vector<double> row_scale(static_cast<size_t>(B * tps * K));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < K; ++i)
      for (int64_t m = 0; m < tps; ++m)
        row_scale[static_cast<size_t>(b * tps * K + i * tps + m)] =
            wb.valid[static_cast<size_t>(b * K + i)] ? 1.0 : 0.0;
  tokens = scale_rows(tokens, row_scale);

  if (base == 1) {
    Tensor start = apply_embed_norm(w_.start_token);
    Tensor start_rows = gather_rows(start, std::vector<int64_t>(static_cast<size_t>(B), 0));
    Tensor combined = concat_rows({start_rows, tokens});
    std::vector<int64_t> perm2(static_cast<size_t>(B * T));
    for (int64_t b = 0; b < B; ++b) {
      perm2[static_cast<size_t>(b * T)] = b;
      for (int64_t j = 0; j < tps * K; ++j)
        perm2[static_cast<size_t>(b * T + 1 + j)] = B + b * tps * K + j;
    }
    tokens = gather_rows(combined, perm2);
  }

  if (key_valid) {
    key_valid->assign(static_cast<size_t>(B * T), 1);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < K; ++i)
        for (int64_t m = 0; m < tps; ++m)
          (*key_valid)[static_cast<size_t>(b * T + base + i * tps + m)] =
              wb.valid[static_cast<size_t>(b * K + i)];
  }
  return tokens;
}

DTOutput DTModel::forward(const WindowBatch& wb, const DTForwardOptions& opts) const {
  if (opts.layout == TokenLayout::bc && cfg_.predict_returns)
    throw std::invalid_argument("DTModel: the bc layout has no return tokens to predict");
  const int64_t B = wb.batch, K = wb.context;
  const int64_t tps = cfg_.tokens_per_step(opts.layout);
  const int64_t base = cfg_.start_offset(opts.layout);
  const int64_t T = base + tps * K;

  std::vector<uint8_t> key_valid;
  Tensor tokens = assemble_tokens(wb, opts.layout, &key_valid);

  GPTForwardOptions gopts;
  gopts.batch = B;
  gopts.key_valid = &key_valid;
  gopts.dropout_seed = opts.dropout_seed;
  gopts.trace = opts.trace;
  Tensor hidden = gpt_forward(tokens, cfg_.gpt, w_.gpt, gopts);

  // action for step i reads the state token of step i
  std::vector<int64_t> action_rows(static_cast<size_t>(B * K));
  const int64_t state_off = opts.layout == TokenLayout::dt ? 1 : 0;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < K; ++i)
      action_rows[static_cast<size_t>(b * K + i)] = b * T + base + i * tps + state_off;
  DTOutput out;
  out.action_out = add_rowvec(matmul(gather_rows(hidden, action_rows), w_.w_pred_a), w_.b_pred_a);

  if (cfg_.predict_returns && opts.layout == TokenLayout::dt) {
    std::vector<int64_t> ret_rows(static_cast<size_t>(B * K));
    out.return_valid.assign(static_cast<size_t>(B * K), 0);
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t i = 0; i < K; ++i) {
        const size_t slot = static_cast<size_t>(b * K + i);
        const bool first_valid =
            wb.valid[slot] && (i == 0 || !wb.valid[slot - 1]);
        if (first_valid) {
          // conditioning exists only for true episode starts, through
          // the learned start token
          if (wb.timesteps[slot] == 0) {
            ret_rows[slot] = b * T;
            out.return_valid[slot] = 1;
          } else {
            ret_rows[slot] = b * T;  // row unused, prediction masked
          }
        } else if (wb.valid[slot]) {
          ret_rows[slot] = b * T + base + i * tps - 1;  // previous action token
          out.return_valid[slot] = 1;
        } else {
          ret_rows[slot] = b * T;
        }
      }
    }
    out.return_logits =
        add_rowvec(matmul(gather_rows(hidden, ret_rows), w_.w_pred_R), w_.b_pred_R);
  }
  return out;
}

Tensor DTModel::action_loss(const DTOutput& out, const WindowBatch& wb) const {
  std::vector<uint8_t> ignore(wb.valid.size());
  for (size_t i = 0; i < ignore.size(); ++i) ignore[i] = wb.valid[i] ? 0 : 1;
  if (cfg_.action_space.is_discrete()) {
    return loss_cross_entropy(out.action_out, wb.actions, ignore);
  }
  const int64_t adim = cfg_.action_space.dim;
  Tensor target({wb.slots(), adim}, wb.actions_cont);
  std::vector<uint8_t> elem_ignore(static_cast<size_t>(wb.slots() * adim));
  for (int64_t s = 0; s < wb.slots(); ++s)
    std::fill_n(elem_ignore.begin() + s * adim, adim, ignore[static_cast<size_t>(s)]);
  return loss_mse(out.action_out, target, elem_ignore);
}

Tensor DTModel::return_loss(const DTOutput& out, const WindowBatch& wb) const {
  if (!out.return_logits)
    throw std::invalid_argument("DTModel: forward ran without return predictions");
  std::vector<int64_t> targets(wb.valid.size(), 0);
  std::vector<uint8_t> ignore(wb.valid.size(), 1);
  for (size_t s = 0; s < wb.valid.size(); ++s) {
    if (!out.return_valid[s]) continue;
    targets[s] = cfg_.bin_of_return(wb.returns_to_go[s]);
    ignore[s] = 0;
  }
  return loss_cross_entropy(*out.return_logits, targets, ignore);
}

Tensor DTModel::tokenize_window_raw(const WindowBatch& wb) const {
  if (wb.batch != 1) throw std::invalid_argument("tokenize_window: single window expected");
  const int64_t K = wb.context;
  const int64_t slots = K;
  Tensor t_emb = gather_rows(w_.embed_t, wb.timesteps);
  Tensor s_emb =
      add_rowvec(matmul(Tensor({slots, cfg_.state_dim}, wb.states), w_.w_embed_s), w_.b_embed_s);
  s_emb = add(s_emb, t_emb);
  Tensor a_emb;
  if (cfg_.action_space.is_discrete()) {
    a_emb = gather_rows(w_.embed_a_table, wb.actions);
  } else {
    a_emb = add_rowvec(
        matmul(Tensor({slots, cfg_.action_space.dim}, wb.actions_cont), w_.w_embed_a),
        w_.b_embed_a);
  }
  a_emb = add(a_emb, t_emb);
  Tensor r_emb =
      add_rowvec(matmul(Tensor({slots, 1}, wb.returns_to_go), w_.w_embed_R), w_.b_embed_R);
  r_emb = add(r_emb, t_emb);
  Tensor stacked = concat_rows({r_emb, s_emb, a_emb});
  std::vector<int64_t> perm(static_cast<size_t>(3 * K));
  for (int64_t i = 0; i < K; ++i)
    for (int64_t m = 0; m < 3; ++m) perm[static_cast<size_t>(i * 3 + m)] = m * K + i;
  return gather_rows(stacked, perm);
}

Tensor DTModel::tokenize_window(const WindowBatch& wb) const {
  Tensor tokens = apply_embed_norm(tokenize_window_raw(wb));
  std::vector<double> row_scale(static_cast<size_t>(3 * wb.context));
  for (int64_t i = 0; i < wb.context; ++i)
    for (int64_t m = 0; m < 3; ++m)
      row_scale[static_cast<size_t>(i * 3 + m)] = wb.valid[static_cast<size_t>(i)] ? 1.0 : 0.0;
  return scale_rows(tokens, row_scale);
}

// ----- config / checkpoint serialization -----

namespace {

json config_to_json_obj(const DTConfig& cfg) {
  json j;
  j["context_k"] = cfg.context_k;
  j["max_episode_len"] = cfg.max_episode_len;
  j["state_dim"] = cfg.state_dim;
  j["action_space"] = {{"kind", cfg.action_space.is_discrete() ? "discrete" : "continuous"},
                       {"n", cfg.action_space.n},
                       {"dim", cfg.action_space.dim}};
  j["gpt"] = {{"n_layers", cfg.gpt.n_layers},     {"n_heads", cfg.gpt.n_heads},
              {"d_model", cfg.gpt.d_model},       {"max_tokens", cfg.gpt.max_tokens},
              {"dropout_rate", cfg.gpt.dropout_rate},
              {"activation", cfg.gpt.activation == Activation::gelu ? "gelu" : "relu"}};
  j["embed_norm"] = cfg.embed_norm == EmbedNorm::layer_norm ? "layer_norm" : "tanh";
  j["predict_returns"] = cfg.predict_returns;
  j["return_bins"] = cfg.return_bins;
  j["zero_return_inputs"] = cfg.zero_return_inputs;
  return j;
}

DTConfig config_from_json_obj(const json& j) {
  DTConfig cfg;
  cfg.context_k = j.at("context_k").get<int64_t>();
  cfg.max_episode_len = j.at("max_episode_len").get<int64_t>();
  cfg.state_dim = j.at("state_dim").get<int64_t>();
  const auto& as = j.at("action_space");
  if (as.at("kind").get<std::string>() == "discrete") {
    cfg.action_space = ActionSpace::discrete(as.at("n").get<int64_t>());
  } else {
    cfg.action_space = ActionSpace::continuous(as.at("dim").get<int64_t>());
  }
  const auto& g = j.at("gpt");
  cfg.gpt.n_layers = g.at("n_layers").get<int64_t>();
  cfg.gpt.n_heads = g.at("n_heads").get<int64_t>();
  cfg.gpt.d_model = g.at("d_model").get<int64_t>();
  cfg.gpt.max_tokens = g.at("max_tokens").get<int64_t>();
  cfg.gpt.dropout_rate = g.at("dropout_rate").get<double>();
  cfg.gpt.activation =
      g.at("activation").get<std::string>() == "relu" ? Activation::relu : Activation::gelu;
  cfg.embed_norm =
      j.at("embed_norm").get<std::string>() == "tanh" ? EmbedNorm::tanh : EmbedNorm::layer_norm;
  cfg.predict_returns = j.at("predict_returns").get<bool>();
  cfg.return_bins = j.at("return_bins").get<std::vector<double>>();
  cfg.zero_return_inputs = j.value("zero_return_inputs", false);
  return cfg;
}

constexpr const char* kCheckpointMagic = "DTLAB_CHECKPOINT";
constexpr int kCheckpointVersion = 1;

}  // namespace

std::string dt_config_to_json(const DTConfig& cfg) { return config_to_json_obj(cfg).dump(); }

DTConfig dt_config_from_json(const std::string& text) {
  return config_from_json_obj(json::parse(text));
}

void DTModel::save_checkpoint(const std::string& path, const std::string& extra_state) const {
  json j;
  j["magic"] = kCheckpointMagic;
  j["version"] = kCheckpointVersion;
  j["config"] = config_to_json_obj(cfg_);
  json weights = json::object();
  for (const auto& [name, t] : params_.items()) {
    weights[name] = {{"shape", t.shape()}, {"data", t.data()}};
  }
  j["weights"] = std::move(weights);
  if (!extra_state.empty()) j["train_state"] = extra_state;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out << j.dump();
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

DTModel DTModel::load_checkpoint(const std::string& path, std::string* extra_state) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint: " + e.what());
  }
  if (j.value("magic", "") != kCheckpointMagic)
    throw std::runtime_error("load_checkpoint: " + path + " lacks the checkpoint magic string");
  if (j.value("version", -1) != kCheckpointVersion)
    throw std::runtime_error("load_checkpoint: unsupported checkpoint version");
  DTModel model(config_from_json_obj(j.at("config")), 0);
  const auto& weights = j.at("weights");
  for (auto& [name, t] : model.params_.items()) {
    if (!weights.contains(name))
      throw std::runtime_error("load_checkpoint: missing weight " + name);
    const auto& w = weights.at(name);
    const Shape shape = w.at("shape").get<Shape>();
    if (shape != t.shape())
      throw std::runtime_error("load_checkpoint: weight " + name + " has shape " +
                               shape_str(shape) + ", model expects " + shape_str(t.shape()));
    t.data() = w.at("data").get<std::vector<double>>();
  }
  if (extra_state) *extra_state = j.value("train_state", "");
  return model;
}

}  // namespace dtlab
