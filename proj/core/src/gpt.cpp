#include "dtlab/gpt.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace dtlab {

void GPTConfig::validate() const {
  if (n_layers < 0) throw std::invalid_argument("GPTConfig: n_layers must be >= 0");
  if (n_heads < 1) throw std::invalid_argument("GPTConfig: n_heads must be positive");
  if (d_model < 1 || d_model % n_heads != 0) {
    throw std::invalid_argument("GPTConfig: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (max_tokens < 3) throw std::invalid_argument("GPTConfig: max_tokens must be >= 3");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    throw std::invalid_argument("GPTConfig: dropout_rate must be in [0,1)");
}

GPTWeights GPTWeights::init(const GPTConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const int64_t d = cfg.d_model;
  GPTWeights w;
  w.layers.resize(static_cast<size_t>(cfg.n_layers));
  for (auto& l : w.layers) {
    l.ln1_g = Tensor::full({d}, 1.0);
    l.ln1_b = Tensor({d});
    l.wq = Tensor::randn({d, d}, rng, 0.02);
    l.bq = Tensor({d});
    l.wk = Tensor::randn({d, d}, rng, 0.02);
    l.wv = Tensor::randn({d, d}, rng, 0.02);
    l.bv = Tensor({d});
    l.wo = Tensor::randn({d, d}, rng, 0.02);
    l.bo = Tensor({d});
    l.ln2_g = Tensor::full({d}, 1.0);
    l.ln2_b = Tensor({d});
    l.w_fc = Tensor::randn({d, 4 * d}, rng, 0.02);
    l.b_fc = Tensor({4 * d});
    l.w_proj = Tensor::randn({4 * d, d}, rng, 0.02);
    l.b_proj = Tensor({d});
  }
  w.lnf_g = Tensor::full({d}, 1.0);
  w.lnf_b = Tensor({d});
  return w;
}

void GPTWeights::register_params(ParamStore& store, const std::string& prefix) {
  for (size_t i = 0; i < layers.size(); ++i) {
    const std::string p = prefix + "layer" + std::to_string(i) + ".";
    auto& l = layers[i];
    store.add(p + "ln1_g", l.ln1_g);
    store.add(p + "ln1_b", l.ln1_b);
    store.add(p + "wq", l.wq);
    store.add(p + "bq", l.bq);
    store.add(p + "wk", l.wk);
    store.add(p + "wv", l.wv);
    store.add(p + "bv", l.bv);
    store.add(p + "wo", l.wo);
    store.add(p + "bo", l.bo);
    store.add(p + "ln2_g", l.ln2_g);
    store.add(p + "ln2_b", l.ln2_b);
    store.add(p + "w_fc", l.w_fc);
    store.add(p + "b_fc", l.b_fc);
    store.add(p + "w_proj", l.w_proj);
    store.add(p + "b_proj", l.b_proj);
  }
  store.add(prefix + "lnf_g", lnf_g);
  store.add(prefix + "lnf_b", lnf_b);
}

std::vector<Tensor> build_causal_masks(int64_t batch, int64_t n_tokens,
                                       const std::vector<uint8_t>* key_valid) {
  std::vector<Tensor> masks;
  masks.reserve(static_cast<size_t>(batch));
  for (int64_t b = 0; b < batch; ++b) {
    Tensor m({n_tokens, n_tokens});
    auto& mv = m.data();
    for (int64_t i = 0; i < n_tokens; ++i) {
      for (int64_t j = 0; j <= i; ++j) {
        const bool valid = !key_valid || (*key_valid)[static_cast<size_t>(b * n_tokens + j)] ||
                           j == i;
        mv[static_cast<size_t>(i * n_tokens + j)] = valid ? 1.0 : 0.0;
      }
    }
    masks.push_back(std::move(m));
  }
  return masks;
}

namespace {

struct AttnContext {
  int64_t batch = 1;
  const std::vector<Tensor>* masks = nullptr;
  std::optional<uint64_t> dropout_seed;
  int64_t layer_index = 0;
  double dropout_rate = 0.0;
  AttentionTrace* trace = nullptr;
};

// QKV already projected over the flat batch; attention runs per sample
// so tokens never mix across windows.
Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, const GPTConfig& cfg,
                      const AttnContext& ctx) {
  const int64_t bt = q.dim(0);
  const int64_t T = bt / ctx.batch;
  const int64_t hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Tensor> sample_ctx;
  sample_ctx.reserve(static_cast<size_t>(ctx.batch));
  for (int64_t b = 0; b < ctx.batch; ++b) {
    Tensor qb = ctx.batch == 1 ? q : slice_rows(q, b * T, T);
    Tensor kb = ctx.batch == 1 ? k : slice_rows(k, b * T, T);
    Tensor vb = ctx.batch == 1 ? v : slice_rows(v, b * T, T);
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(cfg.n_heads));
    for (int64_t h = 0; h < cfg.n_heads; ++h) {
      Tensor qh = cfg.n_heads == 1 ? qb : slice_cols(qb, h * hd, hd);
      Tensor kh = cfg.n_heads == 1 ? kb : slice_cols(kb, h * hd, hd);
      Tensor vh = cfg.n_heads == 1 ? vb : slice_cols(vb, h * hd, hd);
      Tensor logits = mul_scalar(matmul(qh, transpose(kh)), scale);
      Tensor att = softmax_masked(logits, (*ctx.masks)[static_cast<size_t>(b)]);
      if (ctx.trace) {
        ctx.trace->probs[static_cast<size_t>(ctx.layer_index)][static_cast<size_t>(h)]
                        [static_cast<size_t>(b)] = att.data();
      }
      if (ctx.dropout_seed) {
        att = dropout(att, ctx.dropout_rate,
                      split_seed(*ctx.dropout_seed, ctx.layer_index * 3 + 0, b, h));
      }
      heads.push_back(matmul(att, vh));
    }
    sample_ctx.push_back(cfg.n_heads == 1 ? heads[0] : concat_cols(heads));
  }
  return ctx.batch == 1 ? sample_ctx[0] : concat_rows(sample_ctx);
}

Tensor block_batched(const Tensor& x, const GPTLayerWeights& w, const GPTConfig& cfg,
                     const AttnContext& ctx) {
  Tensor xn = layer_norm(x, w.ln1_g, w.ln1_b);
  Tensor q = add_rowvec(matmul(xn, w.wq), w.bq);
  Tensor k = matmul(xn, w.wk);
  Tensor v = add_rowvec(matmul(xn, w.wv), w.bv);
  Tensor att = attention_core(q, k, v, cfg, ctx);
  att = add_rowvec(matmul(att, w.wo), w.bo);
  if (ctx.dropout_seed) {
    att = dropout(att, ctx.dropout_rate, split_seed(*ctx.dropout_seed, ctx.layer_index * 3 + 1));
  }
  Tensor h = add(x, att);
  Tensor hn = layer_norm(h, w.ln2_g, w.ln2_b);
  Tensor m = add_rowvec(matmul(hn, w.w_fc), w.b_fc);
  m = activations(m, cfg.activation);
  m = add_rowvec(matmul(m, w.w_proj), w.b_proj);
  if (ctx.dropout_seed) {
    m = dropout(m, ctx.dropout_rate, split_seed(*ctx.dropout_seed, ctx.layer_index * 3 + 2));
  }
  return add(h, m);
}

}  // namespace

Tensor causal_self_attention(const Tensor& x, const GPTLayerWeights& w, const GPTConfig& cfg,
                             std::vector<std::vector<double>>* head_probs) {
  const int64_t T = x.dim(0);
  if (T > cfg.max_tokens) {
    throw std::invalid_argument("causal_self_attention: " + std::to_string(T) +
                                " tokens exceed context capacity " +
                                std::to_string(cfg.max_tokens));
  }
  auto masks = build_causal_masks(1, T, nullptr);
  AttnContext ctx;
  ctx.masks = &masks;
  ctx.dropout_rate = cfg.dropout_rate;
  AttentionTrace trace;
  if (head_probs) {
    trace.n_tokens = T;
    trace.batch = 1;
    trace.probs.assign(1, std::vector<std::vector<std::vector<double>>>(
                              static_cast<size_t>(cfg.n_heads),
                              std::vector<std::vector<double>>(1)));
    ctx.trace = &trace;
  }
  Tensor q = add_rowvec(matmul(x, w.wq), w.bq);
  Tensor k = matmul(x, w.wk);
  Tensor v = add_rowvec(matmul(x, w.wv), w.bv);
  Tensor att = attention_core(q, k, v, cfg, ctx);
  att = add_rowvec(matmul(att, w.wo), w.bo);
  if (head_probs) {
    head_probs->clear();
    for (int64_t h = 0; h < cfg.n_heads; ++h)
      head_probs->push_back(trace.probs[0][static_cast<size_t>(h)][0]);
  }
  return att;
}

Tensor transformer_block(const Tensor& x, const GPTLayerWeights& w, const GPTConfig& cfg) {
  auto masks = build_causal_masks(1, x.dim(0), nullptr);
  AttnContext ctx;
  ctx.masks = &masks;
  ctx.dropout_rate = cfg.dropout_rate;
  return block_batched(x, w, cfg, ctx);
}

Tensor gpt_forward(const Tensor& tokens, const GPTConfig& cfg, const GPTWeights& w,
                   const GPTForwardOptions& opts) {
  const int64_t bt = tokens.dim(0);
  if (opts.batch < 1 || bt % opts.batch != 0)
    throw std::invalid_argument("gpt_forward: rows not divisible by batch");
  const int64_t T = bt / opts.batch;
  if (T > cfg.max_tokens) {
    throw std::invalid_argument("gpt_forward: " + std::to_string(T) +
                                " tokens exceed context capacity " + std::to_string(cfg.max_tokens));
  }
  if (static_cast<int64_t>(w.layers.size()) != cfg.n_layers)
    throw std::invalid_argument("gpt_forward: weight/config layer count mismatch");
  auto masks = build_causal_masks(opts.batch, T, opts.key_valid);
  if (opts.trace) {
    opts.trace->n_tokens = T;
    opts.trace->batch = opts.batch;
    opts.trace->probs.assign(
        static_cast<size_t>(cfg.n_layers),
        std::vector<std::vector<std::vector<double>>>(
            static_cast<size_t>(cfg.n_heads),
            std::vector<std::vector<double>>(static_cast<size_t>(opts.batch))));
  }
  Tensor x = tokens;
  AttnContext ctx;
  ctx.batch = opts.batch;
  ctx.masks = &masks;
  ctx.dropout_seed = opts.dropout_seed;
  ctx.dropout_rate = cfg.dropout_rate;
  ctx.trace = opts.trace;
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    ctx.layer_index = l;
    x = block_batched(x, w.layers[static_cast<size_t>(l)], cfg, ctx);
  }
  return layer_norm(x, w.lnf_g, w.lnf_b);
}

}  // namespace dtlab
