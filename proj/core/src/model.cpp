#include "moetune/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "moetune/autodiff.hpp"
#include "moetune/kernels.hpp"

namespace moetune {

void ModelConfig::validate() const {
  if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || vocab_size == 0 ||
      max_seq_len == 0) {
    throw std::invalid_argument("ModelConfig: all sizes must be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
  }
  if (active_experts < 1 || active_experts > total_experts) {
    throw std::invalid_argument("ModelConfig: need 1 <= active_experts <= total_experts");
  }
}

namespace {

Ffn make_ffn(const ModelConfig& cfg, std::mt19937_64& rng) {
  Ffn f;
  f.w1 = Tensor::randn({cfg.d_model, cfg.d_ff}, rng, 0.02, true);
  f.w2 = Tensor::randn({cfg.d_ff, cfg.d_model}, rng, 0.02, true);
  if (cfg.ffn_style == FfnStyle::gated_three_matrix) {
    f.w3 = Tensor::randn({cfg.d_model, cfg.d_ff}, rng, 0.02, true);
  } else {
    f.b1 = Tensor::zeros({cfg.d_ff}, true);
    f.b2 = Tensor::zeros({cfg.d_model}, true);
  }
  return f;
}

Ffn clone_ffn(const Ffn& src) {
  Ffn f;
  f.w1 = src.w1.clone();
  f.w2 = src.w2.clone();
  if (src.w3.defined()) f.w3 = src.w3.clone();
  if (src.b1.defined()) f.b1 = src.b1.clone();
  if (src.b2.defined()) f.b2 = src.b2.clone();
  return f;
}

Tensor ffn_forward(const Ffn& f, const Tensor& x, FfnStyle style) {
  if (style == FfnStyle::gated_three_matrix) {
    return matmul(mul(silu(matmul(x, f.w1)), matmul(x, f.w3)), f.w2);
  }
  return add_bias(matmul(silu(add_bias(matmul(x, f.w1), f.b1)), f.w2), f.b2);
}

void push_ffn_params(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                     const Ffn& f) {
  out.emplace_back(prefix + ".w1", f.w1);
  out.emplace_back(prefix + ".w2", f.w2);
  if (f.w3.defined()) out.emplace_back(prefix + ".w3", f.w3);
  if (f.b1.defined()) out.emplace_back(prefix + ".b1", f.b1);
  if (f.b2.defined()) out.emplace_back(prefix + ".b2", f.b2);
}

}  // namespace

Transformer Transformer::make_dense(const ModelConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  if (cfg.n_kv_heads != 0 && cfg.n_kv_heads != cfg.n_heads) {
    throw std::invalid_argument("Transformer: runtime model requires n_kv_heads == n_heads");
  }
  if (cfg.tie_embeddings) {
    throw std::invalid_argument("Transformer: runtime model does not tie embeddings");
  }
  Transformer m;
  m.cfg_ = cfg;
  m.cfg_.total_experts = 1;
  m.cfg_.active_experts = 1;
  m.tok_emb_ = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, 0.02, true);
  m.pos_emb_ = Tensor::randn({cfg.max_seq_len, cfg.d_model}, rng, 0.02, true);
  m.blocks_.resize(cfg.n_layers);
  for (auto& b : m.blocks_) {
    b.ln1_gain = Tensor::full({cfg.d_model}, 1.0, true);
    b.ln1_bias = Tensor::zeros({cfg.d_model}, true);
    b.wq = Tensor::randn({cfg.d_model, cfg.d_model}, rng, 0.02, true);
    b.wk = Tensor::randn({cfg.d_model, cfg.d_model}, rng, 0.02, true);
    b.wv = Tensor::randn({cfg.d_model, cfg.d_model}, rng, 0.02, true);
    b.wo = Tensor::randn({cfg.d_model, cfg.d_model}, rng, 0.02, true);
    b.ln2_gain = Tensor::full({cfg.d_model}, 1.0, true);
    b.ln2_bias = Tensor::zeros({cfg.d_model}, true);
    b.ffn.experts.push_back(make_ffn(cfg, rng));
  }
  m.final_ln_gain_ = Tensor::full({cfg.d_model}, 1.0, true);
  m.final_ln_bias_ = Tensor::zeros({cfg.d_model}, true);
  m.out_proj_ = Tensor::randn({cfg.d_model, cfg.vocab_size}, rng, 0.02, true);
  return m;
}

bool Transformer::is_moe() const {
  return !blocks_.empty() && blocks_.front().ffn.router.defined();
}

Tensor Transformer::attention_block(const Tensor& x, std::size_t layer) const {
  const std::size_t l = x.dim(0);
  if (l > cfg_.max_seq_len) {
    throw std::invalid_argument("attention_block: sequence length exceeds max_seq_len");
  }
  const Block& b = blocks_.at(layer);
  const std::size_t dh = cfg_.d_model / cfg_.n_heads;

  Tensor h = layer_norm_rows(x, b.ln1_gain, b.ln1_bias);
  Tensor q = matmul(h, b.wq);
  Tensor k = matmul(h, b.wk);
  Tensor v = matmul(h, b.wv);

  // Causal mask, shared across heads.
  Tensor mask = Tensor::zeros({l, l});
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = i + 1; j < l; ++j) mask.data()[i * l + j] = -1e9;

  std::vector<Tensor> heads;
  heads.reserve(cfg_.n_heads);
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t hd = 0; hd < cfg_.n_heads; ++hd) {
    Tensor qh = slice_cols(q, hd * dh, dh);
    Tensor kh = slice_cols(k, hd * dh, dh);
    Tensor vh = slice_cols(v, hd * dh, dh);
    Tensor scores = add(scale(matmul(qh, transpose2d(kh)), scl), mask);
    Tensor attn = softmax_rows(scores);
    heads.push_back(matmul(attn, vh));
  }
  Tensor ctx = cfg_.n_heads == 1 ? heads[0] : concat_cols(heads);
  return add(matmul(ctx, b.wo), x);
}

std::pair<std::vector<std::size_t>, std::vector<double>> gate(const Tensor& x_token,
                                                              const MoELayer& layer,
                                                              std::size_t k) {
  if (!layer.router.defined()) throw std::invalid_argument("gate: layer has no router");
  const std::size_t e = layer.router.dim(1);
  if (k > e) throw std::invalid_argument("gate: k exceeds expert count");
  NoGradGuard ng;
  Tensor row = x_token.rank() == 1
                   ? Tensor::from_data({1, x_token.dim(0)}, x_token.data())
                   : x_token;
  std::vector<std::vector<std::size_t>> sel;
  Tensor w = topk_masked_softmax(matmul(row, layer.router), k, &sel);
  std::vector<double> weights;
  weights.reserve(k);
  for (std::size_t j : sel[0]) weights.push_back(w.at(0, j));
  return {sel[0], weights};
}

MoELayerResult Transformer::moe_layer_forward(const Tensor& x, std::size_t layer) const {
  const Block& b = blocks_.at(layer);
  const std::size_t l = x.dim(0);
  MoELayerResult res;

  if (!b.ffn.router.defined()) {
    res.output = ffn_forward(b.ffn.experts[0], x, cfg_.ffn_style);
    return res;
  }

  const std::size_t e = cfg_.total_experts;
  const std::size_t k = cfg_.active_experts;
  Tensor logits = matmul(x, b.ffn.router);
  std::vector<std::vector<std::size_t>> selected;
  Tensor weights = topk_masked_softmax(logits, k, &selected);
  res.router_probs = softmax_rows(logits);

  // Group tokens per expert so each expert runs one batched FFN.
  std::vector<std::vector<std::size_t>> tokens_of(e);
  for (std::size_t t = 0; t < l; ++t)
    for (std::size_t ei : selected[t]) tokens_of[ei].push_back(t);

  Tensor out;
  for (std::size_t ei = 0; ei < e; ++ei) {
    const auto& toks = tokens_of[ei];
    if (toks.empty()) continue;
    expert_evals_ += toks.size();
    Tensor xs = gather_rows(x, toks);
    Tensor ys = ffn_forward(b.ffn.experts[ei], xs, cfg_.ffn_style);
    std::vector<std::pair<std::size_t, std::size_t>> widx;
    widx.reserve(toks.size());
    for (std::size_t t : toks) widx.emplace_back(t, ei);
    Tensor contrib = scatter_add_rows(row_scale(ys, gather_elems(weights, widx)), toks, l);
    out = out.defined() ? add(out, contrib) : contrib;
  }
  res.output = out;

  res.traces.reserve(l);
  for (std::size_t t = 0; t < l; ++t) {
    RoutingTrace tr;
    tr.layer = layer;
    tr.token = t;
    tr.expert_indices = selected[t];
    for (std::size_t j : selected[t]) tr.gate_weights.push_back(weights.at(t, j));
    tr.router_logits.assign(logits.data().begin() + t * e, logits.data().begin() + (t + 1) * e);
    tr.argmax_expert = selected[t][0];
    res.traces.push_back(std::move(tr));
  }
  return res;
}

ForwardResult Transformer::forward(const std::vector<int>& tokens) const {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (tokens.size() > cfg_.max_seq_len) {
    throw std::invalid_argument("forward: sequence length exceeds max_seq_len");
  }
  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);

  ForwardResult res;
  Tensor x = add(embedding(tok_emb_, tokens), embedding(pos_emb_, positions));
  for (std::size_t li = 0; li < blocks_.size(); ++li) {
    x = attention_block(x, li);
    const Block& b = blocks_[li];
    Tensor h = layer_norm_rows(x, b.ln2_gain, b.ln2_bias);
    MoELayerResult mo = moe_layer_forward(h, li);
    x = add(x, mo.output);
    if (b.ffn.router.defined()) {
      res.router_probs.push_back(mo.router_probs);
      res.moe_layers.push_back(li);
      res.traces.insert(res.traces.end(), mo.traces.begin(), mo.traces.end());
    }
  }
  x = layer_norm_rows(x, final_ln_gain_, final_ln_bias_);
  res.logits = matmul(x, out_proj_);
  return res;
}

std::vector<std::pair<std::string, Tensor>> Transformer::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("tok_emb", tok_emb_);
  out.emplace_back("pos_emb", pos_emb_);
  for (std::size_t li = 0; li < blocks_.size(); ++li) {
    const std::string p = "blocks." + std::to_string(li);
    const Block& b = blocks_[li];
    out.emplace_back(p + ".ln1.gain", b.ln1_gain);
    out.emplace_back(p + ".ln1.bias", b.ln1_bias);
    out.emplace_back(p + ".attn.wq", b.wq);
    out.emplace_back(p + ".attn.wk", b.wk);
    out.emplace_back(p + ".attn.wv", b.wv);
    out.emplace_back(p + ".attn.wo", b.wo);
    out.emplace_back(p + ".ln2.gain", b.ln2_gain);
    out.emplace_back(p + ".ln2.bias", b.ln2_bias);
    for (std::size_t ei = 0; ei < b.ffn.experts.size(); ++ei) {
      push_ffn_params(out, p + ".ffn.experts." + std::to_string(ei), b.ffn.experts[ei]);
    }
    if (b.ffn.router.defined()) out.emplace_back(p + ".ffn.router", b.ffn.router);
  }
  out.emplace_back("final_ln.gain", final_ln_gain_);
  out.emplace_back("final_ln.bias", final_ln_bias_);
  out.emplace_back("out_proj", out_proj_);
  return out;
}

bool Transformer::is_frozen(const std::string& name) const {
  auto it = freeze_.find(name);
  return it != freeze_.end() && it->second;
}

Transformer upcycle_from_dense(const Transformer& dense, std::size_t total_experts,
                               std::size_t active_experts, std::mt19937_64& rng) {
  if (dense.is_moe()) throw std::invalid_argument("upcycle_from_dense: model is already MoE");
  if (active_experts < 1 || active_experts > total_experts) {
    throw std::invalid_argument("upcycle_from_dense: need 1 <= k <= E");
  }
  Transformer m;
  m.cfg_ = dense.cfg_;
  m.cfg_.total_experts = total_experts;
  m.cfg_.active_experts = active_experts;
  m.tok_emb_ = dense.tok_emb_.clone();
  m.pos_emb_ = dense.pos_emb_.clone();
  m.blocks_.resize(dense.blocks_.size());
  for (std::size_t li = 0; li < dense.blocks_.size(); ++li) {
    const auto& src = dense.blocks_[li];
    auto& dst = m.blocks_[li];
    dst.ln1_gain = src.ln1_gain.clone();
    dst.ln1_bias = src.ln1_bias.clone();
    dst.wq = src.wq.clone();
    dst.wk = src.wk.clone();
    dst.wv = src.wv.clone();
    dst.wo = src.wo.clone();
    dst.ln2_gain = src.ln2_gain.clone();
    dst.ln2_bias = src.ln2_bias.clone();
    dst.ffn.experts.reserve(total_experts);
    for (std::size_t ei = 0; ei < total_experts; ++ei) {
      dst.ffn.experts.push_back(clone_ffn(src.ffn.experts[0]));
    }
    dst.ffn.router = Tensor::randn({m.cfg_.d_model, total_experts}, rng, 0.02, true);
  }
  m.final_ln_gain_ = dense.final_ln_gain_.clone();
  m.final_ln_bias_ = dense.final_ln_bias_.clone();
  m.out_proj_ = dense.out_proj_.clone();

  for (const auto& [name, t] : m.named_parameters()) {
    (void)t;
    const bool trainable = name.find(".ffn.experts.") != std::string::npos ||
                           name.find(".ffn.router") != std::string::npos;
    m.freeze_[name] = !trainable;
  }
  return m;
}

ParamCount count_parameters(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  const std::size_t kvh = cfg.n_kv_heads == 0 ? cfg.n_heads : cfg.n_kv_heads;
  const std::size_t kv_dim = (d / cfg.n_heads) * kvh;

  std::size_t expert = 0;
  if (cfg.ffn_style == FfnStyle::gated_three_matrix) {
    expert = 3 * d * cfg.d_ff;
  } else {
    expert = 2 * d * cfg.d_ff + cfg.d_ff + d;
  }
  const std::size_t attn = 2 * d * d + 2 * d * kv_dim;
  const std::size_t per_layer_fixed = attn + 4 * d;  // attention + two layer norms
  std::size_t non_expert = cfg.vocab_size * d + cfg.max_seq_len * d +
                           cfg.n_layers * per_layer_fixed + 2 * d;
  if (!cfg.tie_embeddings) non_expert += d * cfg.vocab_size;
  const std::size_t routers = cfg.n_layers * d * cfg.total_experts;

  ParamCount pc;
  pc.total = non_expert + routers + cfg.n_layers * cfg.total_experts * expert;
  pc.activated = non_expert + routers + cfg.n_layers * cfg.active_experts * expert;
  return pc;
}

std::vector<GenResult> generate(const Transformer& model, const std::vector<int>& prompt,
                                std::size_t max_new_tokens, std::size_t n_votes, int eos_token,
                                double temperature, std::uint64_t seed) {
  if (prompt.size() + max_new_tokens > model.config().max_seq_len) {
    throw std::invalid_argument("generate: prompt + budget exceeds max_seq_len");
  }
  if (n_votes == 0) throw std::invalid_argument("generate: n_votes must be >= 1");
  NoGradGuard ng;
  std::vector<GenResult> votes;
  votes.reserve(n_votes);
  for (std::size_t v = 0; v < n_votes; ++v) {
    std::mt19937_64 rng(seed + v);
    GenResult r;
    r.tokens = prompt;
    r.truncated = true;
    for (std::size_t step = 0; step < max_new_tokens; ++step) {
      ForwardResult fr = model.forward(r.tokens);
      const std::size_t vocab = fr.logits.dim(1);
      const std::size_t last = fr.logits.dim(0) - 1;
      int next = 0;
      if (temperature > 0.0) {
        std::vector<double> p(vocab);
        double mx = fr.logits.at(last, 0);
        for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, fr.logits.at(last, j));
        double z = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) {
          p[j] = std::exp((fr.logits.at(last, j) - mx) / temperature);
          z += p[j];
        }
        std::uniform_real_distribution<double> u(0.0, 1.0);
        double target = u(rng) * z, acc = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) {
          acc += p[j];
          if (acc >= target) {
            next = static_cast<int>(j);
            break;
          }
        }
      } else {
        double best = fr.logits.at(last, 0);
        for (std::size_t j = 1; j < vocab; ++j) {
          if (fr.logits.at(last, j) > best) {
            best = fr.logits.at(last, j);
            next = static_cast<int>(j);
          }
        }
      }
      r.tokens.push_back(next);
      if (next == eos_token) {
        r.truncated = false;
        break;
      }
    }
    votes.push_back(std::move(r));
  }
  return votes;
}

}  // namespace moetune
