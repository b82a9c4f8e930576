#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dtlab/gpt.hpp"
#include "dtlab/window.hpp"

// Return-conditioned trajectory model: windows of (return-to-go, state,
// action) triples are embedded per modality, tagged with a shared
// per-timestep embedding, interleaved into 3K tokens and run through
// the causal transformer. Action predictions read from state-token
// hidden states; optional return predictions read from the token
// preceding each return (a learned start token for the first step).

namespace dtlab {

struct ActionSpace {
  enum class Kind { discrete, continuous };
  Kind kind = Kind::discrete;
  int64_t n = 0;    // discrete cardinality
  int64_t dim = 0;  // continuous dimension

  static ActionSpace discrete(int64_t n) { return {Kind::discrete, n, 0}; }
  static ActionSpace continuous(int64_t dim) { return {Kind::continuous, 0, dim}; }
  bool is_discrete() const { return kind == Kind::discrete; }
  int64_t head_width() const { return is_discrete() ? n : dim; }
};

enum class EmbedNorm { layer_norm, tanh };

// bc drops the return tokens entirely (2K tokens of state/action);
// rewards never enter that path.
enum class TokenLayout { dt, bc };

struct DTConfig {
  int64_t context_k = 10;
  int64_t max_episode_len = 10;
  int64_t state_dim = 1;
  ActionSpace action_space = ActionSpace::discrete(2);
  GPTConfig gpt;
  EmbedNorm embed_norm = EmbedNorm::layer_norm;
  bool predict_returns = false;
  std::vector<double> return_bins;  // ascending achievable integer returns
  // Critic variant: returns enter the layout as uninformative zero
  // tokens, so the return head must condition on observations instead of
  // copying its own input (the copy is exact on hindsight-labelled
  // data, which would freeze the predicted probabilities).
  bool zero_return_inputs = false;

  void validate() const;
  // Index of the bin matching an (integer-valued) return; throws when
  // the value is outside the configured support.
  int64_t bin_of_return(double r) const;
  int64_t tokens_per_step(TokenLayout layout) const { return layout == TokenLayout::dt ? 3 : 2; }
  // 1 when a learned start token is prepended (return prediction mode).
  int64_t start_offset(TokenLayout layout) const {
    return layout == TokenLayout::dt && predict_returns ? 1 : 0;
  }
  int64_t sequence_len(TokenLayout layout) const {
    return start_offset(layout) + tokens_per_step(layout) * context_k;
  }
};

struct DTWeights {
  Tensor w_embed_R, b_embed_R;  // [1 x d], [d]
  Tensor w_embed_s, b_embed_s;  // [S x d], [d]
  Tensor embed_a_table;         // [n_actions x d] (discrete)
  Tensor w_embed_a, b_embed_a;  // [action_dim x d], [d] (continuous)
  Tensor embed_t;               // [max_episode_len x d]
  Tensor embed_ln_g, embed_ln_b;
  Tensor start_token;  // [1 x d]
  GPTWeights gpt;
  Tensor w_pred_a, b_pred_a;
  Tensor w_pred_R, b_pred_R;
};

struct DTForwardOptions {
  TokenLayout layout = TokenLayout::dt;
  std::optional<uint64_t> dropout_seed;
  AttentionTrace* trace = nullptr;
};

struct DTOutput {
  // [B*K x n_actions] logits (discrete) or [B*K x action_dim] values.
  Tensor action_out;
  // [B*K x n_bins], present in return-prediction mode under the dt layout.
  std::optional<Tensor> return_logits;
  // Slots whose return prediction has a causally valid conditioning
  // position (previous action token, or the start token at episode t=0).
  std::vector<uint8_t> return_valid;
};

class DTModel {
 public:
  DTModel(DTConfig cfg, uint64_t init_seed);

  const DTConfig& config() const { return cfg_; }
  DTWeights& weights() { return w_; }
  const DTWeights& weights() const { return w_; }
  ParamStore& params() { return params_; }
  void set_dropout_rate(double rate) { cfg_.gpt.dropout_rate = rate; }

  DTOutput forward(const WindowBatch& wb, const DTForwardOptions& opts = {}) const;

  // Masked mean over valid slots; cross-entropy for discrete actions,
  // mean-squared error for continuous.
  Tensor action_loss(const DTOutput& out, const WindowBatch& wb) const;
  // Cross-entropy over return bins, masked by return_valid.
  Tensor return_loss(const DTOutput& out, const WindowBatch& wb) const;

  // Modality embeddings + shared timestep embedding, interleaved
  // (R, s, a) per step, before the embedding norm. Single window.
  Tensor tokenize_window_raw(const WindowBatch& wb) const;
  // Same plus the configured norm; padded positions are zero vectors.
  Tensor tokenize_window(const WindowBatch& wb) const;

  // Versioned JSON document: config plus named weight arrays with
  // shapes; extra_state carries opaque trainer state for resume.
  void save_checkpoint(const std::string& path, const std::string& extra_state = "") const;
  static DTModel load_checkpoint(const std::string& path, std::string* extra_state = nullptr);

 private:
  Tensor assemble_tokens(const WindowBatch& wb, TokenLayout layout,
                         std::vector<uint8_t>* key_valid) const;
  Tensor apply_embed_norm(const Tensor& tokens) const;

  DTConfig cfg_;
  DTWeights w_;
  ParamStore params_;
};

std::string dt_config_to_json(const DTConfig& cfg);
DTConfig dt_config_from_json(const std::string& text);

}  // namespace dtlab
