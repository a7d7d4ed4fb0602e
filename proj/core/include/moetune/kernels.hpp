#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "moetune/tensor.hpp"

namespace moetune {

// Primitive differentiable kernels. Shapes must match exactly; the only
// broadcast is add_bias. Every kernel records a tape node when recording is
// on and any input requires a gradient.

Tensor matmul(const Tensor& a, const Tensor& b);        // [m,k]x[k,n] -> [m,n]
Tensor transpose2d(const Tensor& a);                    // [m,n] -> [n,m]
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);           // elementwise
Tensor scale(const Tensor& a, double c);
Tensor add_bias(const Tensor& x, const Tensor& bias);   // [m,n] + [n]
Tensor silu(const Tensor& x);
Tensor softmax_rows(const Tensor& x);                   // softmax over last axis of [m,n]
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias);  // eps 1e-5
Tensor embedding(const Tensor& table, const std::vector<int>& ids);  // [V,d] -> [L,d]

/// Mean NLL of targets over positions with mask != 0. Throws if the mask is
/// empty or no position is unmasked.
Tensor cross_entropy_masked(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<std::uint8_t>& mask);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mean_over_rows(const Tensor& x);                 // [m,n] -> [n]

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t width);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows);
/// Adds row i of x into row rows[i] of an [out_rows, n] zero tensor.
Tensor scatter_add_rows(const Tensor& x, const std::vector<std::size_t>& rows,
                        std::size_t out_rows);
Tensor row_scale(const Tensor& x, const Tensor& s);     // row i of x times s[i]
Tensor gather_elems(const Tensor& x,
                    const std::vector<std::pair<std::size_t, std::size_t>>& idx);

/// Per row of [L,E] logits: picks the k largest entries (ties to the lower
/// index), softmaxes over those k only, and leaves every other entry exactly
/// zero. Selection indices are treated as constants by the backward pass.
/// When selected is non-null it receives the chosen indices per row, in
/// descending-logit order.
Tensor topk_masked_softmax(const Tensor& logits, std::size_t k,
                           std::vector<std::vector<std::size_t>>* selected = nullptr);

}  // namespace moetune
