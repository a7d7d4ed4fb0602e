#pragma once

#include <cstddef>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace moetune {

/// Global numeric precision. f32 (the default) stores every kernel output
/// rounded to 32-bit float; f64 keeps full doubles. Gradient-check suites
/// switch to f64 for headroom.
enum class Precision { f32, f64 };

void set_precision(Precision p);
Precision get_precision();

/// RAII precision switch, restores the previous mode on destruction.
class PrecisionGuard {
 public:
  explicit PrecisionGuard(Precision p) : prev_(get_precision()) { set_precision(p); }
  ~PrecisionGuard() { set_precision(prev_); }
  PrecisionGuard(const PrecisionGuard&) = delete;
  PrecisionGuard& operator=(const PrecisionGuard&) = delete;

 private:
  Precision prev_;
};

/// Rounds v through float when the global mode is f32.
double apply_precision(double v);

struct TensorImpl {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};

/// Dense row-major tensor handle. Copies share storage; shape is fixed at
/// construction and product(shape) == data.size() always holds.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false);
  static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  /// Zero-mean normal init, values drawn in shape order from rng.
  static Tensor randn(std::vector<std::size_t> shape, std::mt19937_64& rng, double stddev,
                      bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return impl_->shape; }
  std::size_t size() const { return impl_->data.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }

  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }

  /// Value of a scalar (rank-0 or single-element) tensor.
  double item() const;
  double at(std::size_t i) const { return impl_->data.at(i); }
  double at(std::size_t i, std::size_t j) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  /// Gradient buffer, zero-initialized on first access.
  std::vector<double>& grad();
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad() { impl_->grad.clear(); }
  void accumulate_grad(const std::vector<double>& g);

  /// Deep copy with independent storage (gradient not copied).
  Tensor clone() const;

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

  friend bool same_storage(const Tensor& a, const Tensor& b) { return a.impl_ == b.impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);
std::string shape_str(const std::vector<std::size_t>& shape);

/// Rounds (f32 mode) and rejects non-finite values. Every kernel routes its
/// output through this before wrapping it in a Tensor.
void finalize_values(std::vector<double>& values, const char* op);

}  // namespace moetune
