#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "moetune/tensor.hpp"

namespace moetune {

enum class FfnStyle { two_matrix, gated_three_matrix };

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 260;
  std::size_t max_seq_len = 256;
  std::size_t total_experts = 1;   // E
  std::size_t active_experts = 1;  // k
  FfnStyle ffn_style = FfnStyle::gated_three_matrix;

  // Accounting-only knobs for LLaMA-like presets. The runtime model supports
  // n_kv_heads == n_heads and untied embeddings; count_parameters honors both.
  std::size_t n_kv_heads = 0;  // 0 means n_heads
  bool tie_embeddings = false;

  void validate() const;
};

/// Per-token routing record from one MoE layer.
struct RoutingTrace {
  std::size_t layer = 0;
  std::size_t token = 0;
  std::vector<std::size_t> expert_indices;  // size k, descending router logit
  std::vector<double> gate_weights;         // aligned with expert_indices
  std::vector<double> router_logits;        // all E pre-mask logits
  std::size_t argmax_expert = 0;
};

/// One expert's feed-forward parameters. two_matrix uses w1/b1/w2/b2;
/// gated_three_matrix uses w1/w3/w2 without biases.
struct Ffn {
  Tensor w1;  // [d, ff]
  Tensor w2;  // [ff, d]
  Tensor w3;  // [d, ff]
  Tensor b1;  // [ff]
  Tensor b2;  // [d]
};

struct MoELayer {
  std::vector<Ffn> experts;
  Tensor router;  // [d, E]; undefined on a dense layer
};

struct MoELayerResult {
  Tensor output;        // [L, d], no residual
  Tensor router_probs;  // [L, E] full softmax, gradient-tracked
  std::vector<RoutingTrace> traces;
};

struct ForwardResult {
  Tensor logits;  // [L, vocab]
  std::vector<RoutingTrace> traces;
  std::vector<Tensor> router_probs;     // one [L, E] per MoE layer
  std::vector<std::size_t> moe_layers;  // layer index per router_probs entry
};

/// Decoder-only pre-norm transformer. Dense and MoE variants share the class;
/// a layer is MoE iff its router tensor is defined.
class Transformer {
 public:
  Transformer() = default;
  static Transformer make_dense(const ModelConfig& cfg, std::mt19937_64& rng);

  const ModelConfig& config() const { return cfg_; }
  bool is_moe() const;

  ForwardResult forward(const std::vector<int>& tokens) const;
  /// MSA(LN(x)) + x with causal masking.
  Tensor attention_block(const Tensor& x, std::size_t layer) const;
  MoELayerResult moe_layer_forward(const Tensor& x, std::size_t layer) const;

  /// Stable name -> tensor view of all parameters, in construction order.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  /// Per-parameter freeze flag (true = frozen). Empty on a dense model.
  const std::map<std::string, bool>& freeze_mask() const { return freeze_; }
  bool is_frozen(const std::string& name) const;

  /// Count of (token, expert) FFN evaluations since the last reset.
  std::size_t expert_evaluations() const { return expert_evals_; }
  void reset_expert_evaluations() const { expert_evals_ = 0; }

  struct Block {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, wk, wv, wo;  // each [d, d]
    Tensor ln2_gain, ln2_bias;
    MoELayer ffn;
  };

  ModelConfig cfg_;
  Tensor tok_emb_;  // [vocab, d]
  Tensor pos_emb_;  // [max_seq_len, d]
  std::vector<Block> blocks_;
  Tensor final_ln_gain_, final_ln_bias_;
  Tensor out_proj_;  // [d, vocab]
  std::map<std::string, bool> freeze_;

 private:
  mutable std::size_t expert_evals_ = 0;
};

/// Router logits x.W_v, top-k selection (ties to the lower index), softmax
/// over the k selected logits only. Returns (indices, weights) aligned in
/// descending-logit order.
std::pair<std::vector<std::size_t>, std::vector<double>> gate(const Tensor& x_token,
                                                              const MoELayer& layer,
                                                              std::size_t k);

/// Replicates every dense FFN into total_experts identical experts, adds a
/// zero-mean (std 0.02) router per layer, copies all other parameters and
/// marks them frozen.
Transformer upcycle_from_dense(const Transformer& dense, std::size_t total_experts,
                               std::size_t active_experts, std::mt19937_64& rng);

struct ParamCount {
  std::size_t total = 0;
  std::size_t activated = 0;
};
ParamCount count_parameters(const ModelConfig& cfg);

struct GenResult {
  std::vector<int> tokens;  // prompt + generated
  bool truncated = false;   // budget exhausted before EOS
};

/// Greedy decoding (argmax, ties to the lower token id); n_votes sequences.
/// temperature > 0 enables seeded sampling so votes can differ.
std::vector<GenResult> generate(const Transformer& model, const std::vector<int>& prompt,
                                std::size_t max_new_tokens, std::size_t n_votes, int eos_token,
                                double temperature = 0.0, std::uint64_t seed = 0);

}  // namespace moetune
