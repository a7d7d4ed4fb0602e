#include "moetune/losses.hpp"

#include <map>
#include <stdexcept>

#include "moetune/kernels.hpp"

namespace moetune {

void SpanLabeledBatch::validate() const {
  if (tokens.size() != span_tags.size()) {
    throw std::invalid_argument("SpanLabeledBatch: tokens/span_tags row mismatch");
  }
  for (std::size_t s = 0; s < tokens.size(); ++s) {
    if (span_tags[s].size() != tokens[s].size()) {
      throw std::invalid_argument("SpanLabeledBatch: one tag per target position required");
    }
    if (!tokens[s].empty() && span_tags[s].back() != SpanTag::padding) {
      throw std::invalid_argument("SpanLabeledBatch: last position has no target");
    }
  }
}

namespace {

// Weighted mean of per-sequence mean NLLs: sum(mean_i * count_i) / sum(count_i).
Tensor pool_masked_nll(const std::vector<Tensor>& logits,
                       const std::vector<std::vector<int>>& tokens,
                       const std::vector<std::vector<std::uint8_t>>& masks) {
  Tensor acc;
  std::size_t total = 0;
  for (std::size_t s = 0; s < tokens.size(); ++s) {
    std::size_t count = 0;
    for (auto m : masks[s]) count += m != 0;
    if (count == 0) continue;
    std::vector<int> targets(tokens[s].size(), 0);
    for (std::size_t i = 0; i + 1 < tokens[s].size(); ++i) targets[i] = tokens[s][i + 1];
    Tensor part = scale(cross_entropy_masked(logits[s], targets, masks[s]),
                        static_cast<double>(count));
    acc = acc.defined() ? add(acc, part) : part;
    total += count;
  }
  if (total == 0) throw std::invalid_argument("loss: no unmasked target positions in batch");
  return scale(acc, 1.0 / static_cast<double>(total));
}

std::vector<std::vector<std::uint8_t>> tag_mask(const SpanLabeledBatch& batch, SpanTag tag) {
  std::vector<std::vector<std::uint8_t>> masks(batch.tokens.size());
  for (std::size_t s = 0; s < batch.tokens.size(); ++s) {
    masks[s].resize(batch.span_tags[s].size());
    for (std::size_t i = 0; i < masks[s].size(); ++i) {
      masks[s][i] = batch.span_tags[s][i] == tag ? 1 : 0;
    }
  }
  return masks;
}

bool any_set(const std::vector<std::vector<std::uint8_t>>& masks) {
  for (const auto& row : masks)
    for (auto m : row)
      if (m) return true;
  return false;
}

}  // namespace

Tensor adapt_loss(const Transformer& model, const std::vector<std::vector<int>>& batch) {
  if (batch.empty()) throw std::invalid_argument("adapt_loss: empty batch");
  std::vector<Tensor> logits;
  std::vector<std::vector<std::uint8_t>> masks;
  logits.reserve(batch.size());
  for (const auto& seq : batch) {
    if (seq.size() < 2) throw std::invalid_argument("adapt_loss: sequence too short");
    logits.push_back(model.forward(seq).logits);
    std::vector<std::uint8_t> mask(seq.size(), 1);
    mask.back() = 0;  // no target for the final position
    masks.push_back(std::move(mask));
  }
  return pool_masked_nll(logits, batch, masks);
}

Tensor task_loss_from_logits(const std::vector<Tensor>& logits, const SpanLabeledBatch& batch) {
  batch.validate();
  if (logits.size() != batch.tokens.size()) {
    throw std::invalid_argument("task_loss: one logits tensor per sequence required");
  }
  auto det = tag_mask(batch, SpanTag::detection);
  auto exp = tag_mask(batch, SpanTag::explanation);
  if (!any_set(det) || !any_set(exp)) {
    throw std::invalid_argument("task_loss: batch must contain both detection and explanation spans");
  }
  Tensor both = add(pool_masked_nll(logits, batch.tokens, exp),
                    pool_masked_nll(logits, batch.tokens, det));
  return scale(both, 0.5);
}

Tensor task_loss(const Transformer& model, const SpanLabeledBatch& batch) {
  std::vector<Tensor> logits;
  logits.reserve(batch.tokens.size());
  for (const auto& seq : batch.tokens) logits.push_back(model.forward(seq).logits);
  return task_loss_from_logits(logits, batch);
}

std::vector<BalanceStats> collect_balance_stats(const std::vector<const ForwardResult*>& results,
                                                std::size_t total_experts) {
  // layer -> (argmax counts, weighted P accumulator, token count)
  std::map<std::size_t, std::pair<std::vector<std::size_t>, Tensor>> acc;
  std::map<std::size_t, std::size_t> counts;
  for (const auto* fr : results) {
    for (std::size_t i = 0; i < fr->moe_layers.size(); ++i) {
      const std::size_t layer = fr->moe_layers[i];
      const Tensor& probs = fr->router_probs[i];
      const std::size_t l = probs.dim(0);
      Tensor p_part = scale(mean_over_rows(probs), static_cast<double>(l));
      auto it = acc.find(layer);
      if (it == acc.end()) {
        acc.emplace(layer, std::make_pair(std::vector<std::size_t>(total_experts, 0), p_part));
      } else {
        it->second.second = add(it->second.second, p_part);
      }
      counts[layer] += l;
    }
    for (const auto& tr : fr->traces) acc.at(tr.layer).first[tr.argmax_expert] += 1;
  }
  std::vector<BalanceStats> stats;
  stats.reserve(acc.size());
  for (auto& [layer, entry] : acc) {
    BalanceStats bs;
    bs.layer = layer;
    bs.token_count = counts[layer];
    std::vector<double> f(total_experts);
    for (std::size_t i = 0; i < total_experts; ++i) {
      f[i] = static_cast<double>(entry.first[i]) / static_cast<double>(bs.token_count);
    }
    bs.dispatch_fraction = Tensor::from_data({total_experts}, std::move(f));
    bs.mean_probability = scale(entry.second, 1.0 / static_cast<double>(bs.token_count));
    stats.push_back(std::move(bs));
  }
  return stats;
}

Tensor balance_loss(const std::vector<BalanceStats>& stats) {
  if (stats.empty()) throw std::invalid_argument("balance_loss: no MoE layer statistics");
  Tensor total;
  for (const auto& bs : stats) {
    const auto e = static_cast<double>(bs.dispatch_fraction.size());
    Tensor layer_loss = scale(sum(mul(bs.dispatch_fraction, bs.mean_probability)), e);
    total = total.defined() ? add(total, layer_loss) : layer_loss;
  }
  return total;
}

Tensor combined_loss(const Tensor& task, const Tensor& balance, double alpha) {
  if (alpha < 0.0) throw std::invalid_argument("combined_loss: alpha must be >= 0");
  return add(task, scale(balance, alpha));
}

}  // namespace moetune
