#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "dtlab/tensor.hpp"

// Causally masked transformer built from the tensor ops. Pre-norm
// residual blocks, scaled dot-product attention, optional attention
// tracing for analysis.

namespace dtlab {

struct GPTConfig {
  int64_t n_layers = 3;
  int64_t n_heads = 1;
  int64_t d_model = 128;
  int64_t max_tokens = 64;
  double dropout_rate = 0.1;
  Activation activation = Activation::gelu;

  int64_t head_dim() const { return d_model / n_heads; }
  void validate() const;
};

struct GPTLayerWeights {
  Tensor ln1_g, ln1_b;
  // no key bias: a constant shift of every key cancels in the row
  // softmax, leaving an identically zero gradient
  Tensor wq, bq, wk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b;
  Tensor w_fc, b_fc, w_proj, b_proj;  // 4x expansion
};

struct GPTWeights {
  std::vector<GPTLayerWeights> layers;
  Tensor lnf_g, lnf_b;

  static GPTWeights init(const GPTConfig& cfg, std::mt19937_64& rng);
  void register_params(ParamStore& store, const std::string& prefix);
};

// Per layer, per head, per sample: row-major [n_tokens x n_tokens]
// attention probabilities. Row i sums to 1 over allowed columns j <= i;
// entries above the diagonal are exactly 0.
struct AttentionTrace {
  int64_t n_tokens = 0;
  int64_t batch = 0;
  std::vector<std::vector<std::vector<std::vector<double>>>> probs;  // [layer][head][sample]
};

struct GPTForwardOptions {
  int64_t batch = 1;
  // 0/1 per flat token row; padded tokens are excluded as attention
  // keys (queries may still attend to themselves). Null = all valid.
  const std::vector<uint8_t>* key_valid = nullptr;
  std::optional<uint64_t> dropout_seed;  // nullopt disables dropout
  AttentionTrace* trace = nullptr;
};

// Lower-triangular attention masks, one [T x T] tensor per sample:
// allow(i,j) = j<=i and (valid[j] or j==i).
std::vector<Tensor> build_causal_masks(int64_t batch, int64_t n_tokens,
                                       const std::vector<uint8_t>* key_valid);

// Multi-head causal attention over one sample [T x d_model], including
// QKV and output projections; the residual connection is the caller's.
// head_probs receives one [T x T] matrix per head when non-null.
Tensor causal_self_attention(const Tensor& x, const GPTLayerWeights& w, const GPTConfig& cfg,
                             std::vector<std::vector<double>>* head_probs = nullptr);

// Pre-norm residual block: x + attn(norm(x)), then x + mlp(norm(x)).
Tensor transformer_block(const Tensor& x, const GPTLayerWeights& w, const GPTConfig& cfg);

// Applies all blocks then the final layer norm over a flat [B*T x
// d_model] token matrix; attention never crosses samples.
Tensor gpt_forward(const Tensor& tokens, const GPTConfig& cfg, const GPTWeights& w,
                   const GPTForwardOptions& opts = {});

}  // namespace dtlab
