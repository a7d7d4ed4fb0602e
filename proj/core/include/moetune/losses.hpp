#pragma once

#include <cstdint>
#include <vector>

#include "moetune/model.hpp"
#include "moetune/tensor.hpp"

namespace moetune {

/// Role of each target position. Position i labels the prediction of
/// tokens[i+1]; the last position of a sequence carries padding.
enum class SpanTag : std::uint8_t { prompt, detection, explanation, padding };

struct SpanLabeledBatch {
  std::vector<std::vector<int>> tokens;
  std::vector<std::vector<SpanTag>> span_tags;  // one tag per target position
  void validate() const;
};

/// Per-layer expert load statistics for one batch. dispatch_fraction (F) is
/// built from hard argmax counts and carries no gradient; mean_probability
/// (P) is the mean full-softmax router distribution and stays on the tape.
struct BalanceStats {
  std::size_t layer = 0;
  Tensor dispatch_fraction;  // [E]
  Tensor mean_probability;   // [E]
  std::size_t token_count = 0;
};

/// Mean next-token NLL over all non-padding target positions of the batch.
Tensor adapt_loss(const Transformer& model, const std::vector<std::vector<int>>& batch);

/// (mean NLL over explanation-span tokens + mean NLL over detection-span
/// tokens) / 2, pooled across the batch. Throws if either span is absent.
Tensor task_loss(const Transformer& model, const SpanLabeledBatch& batch);
/// Same, reusing already-computed logits (one tensor per sequence).
Tensor task_loss_from_logits(const std::vector<Tensor>& logits, const SpanLabeledBatch& batch);

/// Aggregates routing statistics of one or more forwards into per-layer
/// BalanceStats (results must come from the same model).
std::vector<BalanceStats> collect_balance_stats(const std::vector<const ForwardResult*>& results,
                                                std::size_t total_experts);

/// Per layer E * sum_i F_i * P_i, summed over layers.
Tensor balance_loss(const std::vector<BalanceStats>& stats);

/// task + alpha * balance.
Tensor combined_loss(const Tensor& task, const Tensor& balance, double alpha);

}  // namespace moetune
