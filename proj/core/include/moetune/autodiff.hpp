#pragma once

#include <functional>
#include <vector>

#include "moetune/tensor.hpp"

namespace moetune {

/// Reverse-mode tape. Kernels push one node per recorded operation in
/// execution order; backward() replays them in reverse exactly once and
/// clears the tape.
class Tape {
 public:
  static Tape& instance();

  bool recording() const { return enabled_ && depth_ == 0; }
  void push(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  friend class NoGradGuard;
  friend void backward(Tensor& loss);
  std::vector<std::function<void()>> nodes_;
  bool enabled_ = true;
  int depth_ = 0;  // NoGradGuard nesting
};

/// Suspends tape recording for its scope.
class NoGradGuard {
 public:
  NoGradGuard() { ++Tape::instance().depth_; }
  ~NoGradGuard() { --Tape::instance().depth_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

/// Populates grad on every requires_grad tensor reachable from loss, then
/// clears the tape. Throws on a non-scalar loss or an already-consumed graph.
void backward(Tensor& loss);

/// Central finite-difference verification of reverse-mode gradients.
///
/// loss_fn must rebuild the forward graph from the current parameter values
/// on every call and be deterministic (verified by two baseline evaluations).
/// The numeric side always runs in f64 regardless of the ambient precision;
/// the analytic side runs in the ambient mode. Per coordinate the relative
/// error uses denominator max(|analytic|, |numeric|, 1e-8); the maximum over
/// all sampled coordinates is returned.
///
/// max_coords_per_param == 0 checks every coordinate; otherwise that many
/// coordinates are sampled per parameter with the given seed.
double finite_diff_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                         double eps, std::size_t max_coords_per_param = 0,
                         unsigned long long seed = 0);

}  // namespace moetune
