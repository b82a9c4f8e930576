#include <doctest.h>

#include <cmath>
#include <random>

#include "dtlab/finite_diff.hpp"
#include "dtlab/gpt.hpp"

using namespace dtlab;

namespace {

GPTConfig small_cfg(int64_t layers = 2, int64_t heads = 2, int64_t d = 8) {
  GPTConfig cfg;
  cfg.n_layers = layers;
  cfg.n_heads = heads;
  cfg.d_model = d;
  cfg.max_tokens = 16;
  cfg.dropout_rate = 0.0;
  return cfg;
}

GPTWeights init_weights(const GPTConfig& cfg, uint64_t seed) {
  std::mt19937_64 rng(seed);
  return GPTWeights::init(cfg, rng);
}

Tensor random_tokens(int64_t t, int64_t d, uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor::randn({t, d}, rng, 1.0);
}

void zero_layer(GPTLayerWeights& l) {
  for (Tensor* t : {&l.wq, &l.bq, &l.wk, &l.wv, &l.bv, &l.wo, &l.bo, &l.w_fc, &l.b_fc,
                    &l.w_proj, &l.b_proj}) {
    std::fill(t->data().begin(), t->data().end(), 0.0);
  }
}

}  // namespace

TEST_CASE("single token attends to itself with weight 1 and emits projected value") {
  GPTConfig cfg = small_cfg(1, 1);
  GPTWeights w = init_weights(cfg, 1);
  Tensor x = random_tokens(1, cfg.d_model, 2);
  std::vector<std::vector<double>> probs;
  Tensor out = causal_self_attention(x, w.layers[0], cfg, &probs);
  CHECK(probs.size() == 1);
  CHECK(probs[0][0] == 1.0);
  Tensor v = add_rowvec(matmul(x, w.layers[0].wv), w.layers[0].bv);
  Tensor expect = add_rowvec(matmul(v, w.layers[0].wo), w.layers[0].bo);
  for (int64_t i = 0; i < cfg.d_model; ++i)
    CHECK(out.at(i) == doctest::Approx(expect.at(i)).epsilon(1e-12));
}

TEST_CASE("zero query projection attends uniformly over allowed positions") {
  GPTConfig cfg = small_cfg(1, 1);
  GPTWeights w = init_weights(cfg, 3);
  std::fill(w.layers[0].wq.data().begin(), w.layers[0].wq.data().end(), 0.0);
  std::fill(w.layers[0].bq.data().begin(), w.layers[0].bq.data().end(), 0.0);
  Tensor x = random_tokens(5, cfg.d_model, 4);
  std::vector<std::vector<double>> probs;
  causal_self_attention(x, w.layers[0], cfg, &probs);
  for (int64_t i = 0; i < 5; ++i)
    for (int64_t j = 0; j <= i; ++j)
      CHECK(probs[0][static_cast<size_t>(i * 5 + j)] ==
            doctest::Approx(1.0 / static_cast<double>(i + 1)).epsilon(1e-12));
}

TEST_CASE("attention is causal: perturbing later tokens leaves earlier outputs bit-identical") {
  GPTConfig cfg = small_cfg(1, 2);
  GPTWeights w = init_weights(cfg, 5);
  Tensor x = random_tokens(6, cfg.d_model, 6);
  Tensor base = causal_self_attention(x, w.layers[0], cfg);
  Tensor x2 = x;
  Tensor shifted(x.shape(), x.data());
  for (int64_t j = 0; j < cfg.d_model; ++j) shifted.at(4 * cfg.d_model + j) += 13.5;
  Tensor out2 = causal_self_attention(shifted, w.layers[0], cfg);
  for (int64_t i = 0; i < 4 * cfg.d_model; ++i) CHECK(base.at(i) == out2.at(i));
}

TEST_CASE("transformer block with zero weights is the identity") {
  GPTConfig cfg = small_cfg(1, 1);
  GPTWeights w = init_weights(cfg, 7);
  zero_layer(w.layers[0]);
  Tensor x = random_tokens(4, cfg.d_model, 8);
  Tensor out = transformer_block(x, w.layers[0], cfg);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(out.at(i) == x.at(i));
}

TEST_CASE("transformer block is causal for every prefix") {
  GPTConfig cfg = small_cfg(1, 2);
  GPTWeights w = init_weights(cfg, 9);
  const int64_t T = 5;
  Tensor x = random_tokens(T, cfg.d_model, 10);
  Tensor base = transformer_block(x, w.layers[0], cfg);
  std::mt19937_64 rng(11);
  for (int64_t p = 0; p < T - 1; ++p) {
    Tensor mod(x.shape(), x.data());
    std::normal_distribution<double> nd(0.0, 2.0);
    for (int64_t i = (p + 1) * cfg.d_model; i < T * cfg.d_model; ++i) mod.at(i) += nd(rng);
    Tensor out = transformer_block(mod, w.layers[0], cfg);
    for (int64_t i = 0; i <= p * cfg.d_model + cfg.d_model - 1; ++i)
      CHECK(base.at(i) == out.at(i));
  }
}

TEST_CASE("gradient flows through a block correctly") {
  GPTConfig cfg = small_cfg(1, 2, 6);
  GPTWeights w = init_weights(cfg, 12);
  auto f = [&](const Tensor& x) { return sum_all(tanh_act(transformer_block(x, w.layers[0], cfg))); };
  std::mt19937_64 rng(13);
  Tensor x = Tensor::randn({3, 6}, rng, 0.7);
  CHECK(finite_diff_check(f, x) < 1e-4);
}

TEST_CASE("zero layers reduce gpt_forward to the final layer norm") {
  GPTConfig cfg = small_cfg(0, 1);
  GPTWeights w = init_weights(cfg, 14);
  Tensor x = random_tokens(4, cfg.d_model, 15);
  Tensor out = gpt_forward(x, cfg, w);
  Tensor expect = layer_norm(x, w.lnf_g, w.lnf_b);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(out.at(i) == expect.at(i));
}

TEST_CASE("zeroing residual-path weights reduces the network to the final norm") {
  GPTConfig cfg = small_cfg(3, 1);
  GPTWeights w = init_weights(cfg, 16);
  for (auto& l : w.layers) zero_layer(l);
  Tensor x = random_tokens(5, cfg.d_model, 17);
  Tensor out = gpt_forward(x, cfg, w);
  Tensor expect = layer_norm(x, w.lnf_g, w.lnf_b);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(out.at(i) == expect.at(i));
}

TEST_CASE("gpt_forward is bit-deterministic, also under a fixed dropout seed") {
  GPTConfig cfg = small_cfg(2, 2);
  cfg.dropout_rate = 0.1;
  GPTWeights w = init_weights(cfg, 18);
  Tensor x = random_tokens(6, cfg.d_model, 19);
  GPTForwardOptions opts;
  CHECK(gpt_forward(x, cfg, w, opts).data() == gpt_forward(x, cfg, w, opts).data());
  opts.dropout_seed = 123;
  CHECK(gpt_forward(x, cfg, w, opts).data() == gpt_forward(x, cfg, w, opts).data());
}

TEST_CASE("full-stack causality holds per prefix, bit-exact") {
  GPTConfig cfg = small_cfg(2, 2);
  GPTWeights w = init_weights(cfg, 20);
  const int64_t T = 7;
  Tensor x = random_tokens(T, cfg.d_model, 21);
  Tensor base = gpt_forward(x, cfg, w);
  std::mt19937_64 rng(22);
  std::normal_distribution<double> nd(0.0, 1.5);
  for (int64_t p = 0; p < T - 1; ++p) {
    Tensor mod(x.shape(), x.data());
    for (int64_t i = (p + 1) * cfg.d_model; i < T * cfg.d_model; ++i) mod.at(i) += nd(rng);
    Tensor out = gpt_forward(mod, cfg, w);
    for (int64_t i = 0; i < (p + 1) * cfg.d_model; ++i) CHECK(base.at(i) == out.at(i));
  }
}

TEST_CASE("attention traces are lower-triangular probability rows across layers and heads") {
  GPTConfig cfg = small_cfg(2, 2);
  GPTWeights w = init_weights(cfg, 23);
  const int64_t T = 6;
  Tensor x = random_tokens(T, cfg.d_model, 24);
  AttentionTrace trace;
  GPTForwardOptions opts;
  opts.trace = &trace;
  gpt_forward(x, cfg, w, opts);
  CHECK(trace.probs.size() == 2);
  for (const auto& layer : trace.probs) {
    CHECK(layer.size() == 2);
    for (const auto& head : layer) {
      const auto& m = head[0];
      for (int64_t i = 0; i < T; ++i) {
        double sum = 0.0;
        for (int64_t j = 0; j < T; ++j) {
          if (j > i) CHECK(m[static_cast<size_t>(i * T + j)] == 0.0);
          sum += m[static_cast<size_t>(i * T + j)];
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
      }
    }
  }
}

TEST_CASE("batched forward treats samples independently") {
  GPTConfig cfg = small_cfg(2, 1);
  GPTWeights w = init_weights(cfg, 25);
  const int64_t T = 4;
  Tensor a = random_tokens(T, cfg.d_model, 26);
  Tensor b = random_tokens(T, cfg.d_model, 27);
  Tensor both = concat_rows({a, b});
  GPTForwardOptions opts;
  opts.batch = 2;
  Tensor out = gpt_forward(both, cfg, w, opts);
  Tensor oa = gpt_forward(a, cfg, w);
  Tensor ob = gpt_forward(b, cfg, w);
  for (int64_t i = 0; i < oa.numel(); ++i) {
    CHECK(out.at(i) == oa.at(i));
    CHECK(out.at(T * cfg.d_model + i) == ob.at(i));
  }
}

TEST_CASE("padded keys are masked out but padded queries still self-attend") {
  GPTConfig cfg = small_cfg(1, 1);
  GPTWeights w = init_weights(cfg, 28);
  const int64_t T = 5;
  Tensor x = random_tokens(T, cfg.d_model, 29);
  // zero out the first two (padded) token rows like the model does
  for (int64_t i = 0; i < 2 * cfg.d_model; ++i) x.at(i) = 0.0;
  std::vector<uint8_t> valid = {0, 0, 1, 1, 1};
  GPTForwardOptions opts;
  opts.key_valid = &valid;
  AttentionTrace trace;
  opts.trace = &trace;
  gpt_forward(x, cfg, w, opts);
  const auto& m = trace.probs[0][0][0];
  for (int64_t i = 2; i < T; ++i) {
    CHECK(m[static_cast<size_t>(i * T + 0)] == 0.0);
    CHECK(m[static_cast<size_t>(i * T + 1)] == 0.0);
  }
  CHECK(m[0] == 1.0);  // padded query row attends to itself only
}

TEST_CASE("context overflow raises") {
  GPTConfig cfg = small_cfg(1, 1);
  cfg.max_tokens = 4;
  GPTWeights w = init_weights(cfg, 30);
  Tensor x = random_tokens(5, cfg.d_model, 31);
  CHECK_THROWS_WITH_AS(gpt_forward(x, cfg, w), doctest::Contains("exceed"),
                       std::invalid_argument);
}

TEST_CASE("config validation") {
  GPTConfig cfg;
  cfg.d_model = 10;
  cfg.n_heads = 3;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = small_cfg();
  cfg.max_tokens = 2;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
