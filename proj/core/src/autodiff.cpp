#include "moetune/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <stdexcept>

namespace moetune {

Tape& Tape::instance() {
  thread_local Tape tape;
  return tape;
}

void backward(Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar tensor");
  }
  Tape& tape = Tape::instance();
  if (tape.nodes_.empty()) {
    throw std::runtime_error("backward: graph is empty or already consumed");
  }
  loss.grad()[0] = 1.0;
  for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) (*it)();
  tape.clear();
}

double finite_diff_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                         double eps, std::size_t max_coords_per_param, unsigned long long seed) {
  if (eps <= 0.0) throw std::invalid_argument("finite_diff_check: eps must be positive");

  Tape::instance().clear();
  for (auto& p : params) p.zero_grad();
  Tensor loss = loss_fn();
  const double f0 = loss.item();
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad());

  // All FD evaluations (and the determinism probe) run without recording
  // and in f64 for headroom.
  NoGradGuard ng;
  PrecisionGuard pg(Precision::f64);

  {
    const double f1 = loss_fn().item();
    // Same rounded inputs, so f32-mode f0 and f64 probe can differ only by
    // accumulation precision; an exact repeat must agree with itself.
    const double f2 = loss_fn().item();
    if (std::memcmp(&f1, &f2, sizeof(double)) != 0) {
      throw std::runtime_error("finite_diff_check: loss_fn is not deterministic");
    }
    (void)f0;
  }

  std::mt19937_64 rng(seed);
  double max_rel = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& data = params[pi].data();
    std::vector<std::size_t> coords(data.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (max_coords_per_param > 0 && coords.size() > max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords_per_param);
    }
    for (std::size_t c : coords) {
      const double saved = data[c];
      data[c] = saved + eps;
      const double fp = loss_fn().item();
      data[c] = saved - eps;
      const double fm = loss_fn().item();
      data[c] = saved;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[pi][c];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::fabs(a - numeric) / denom);
    }
  }
  return max_rel;
}

}  // namespace moetune
