#include "moetune/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "moetune/autodiff.hpp"

namespace moetune {

namespace {

bool want_grad(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::instance().recording()) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void require_matrix(const Tensor& t, const char* op) {
  if (!t.defined() || t.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected a rank-2 tensor");
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

// Output gradient of a tape node, or nullptr when no gradient reached it.
const std::vector<double>* out_grad(const std::shared_ptr<TensorImpl>& out) {
  return out->grad.empty() ? nullptr : &out->grad;
}

void accum(const std::shared_ptr<TensorImpl>& t, const std::vector<double>& g) {
  if (!t->requires_grad) return;
  if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) t->grad[i] += g[i];
}

Tensor make_result(std::vector<std::size_t> shape, std::vector<double> values, const char* op,
                   bool tracked) {
  finalize_values(values, op);
  Tensor out = Tensor::from_data(std::move(shape), std::move(values));
  out.set_requires_grad(tracked);
  return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw std::invalid_argument("matmul: inner dimensions " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      if (av == 0.0) continue;
      const double* brow = pb + kk * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  const bool tracked = want_grad({&a, &b});
  Tensor res = make_result({m, n}, std::move(out), "matmul", tracked);
  if (tracked) {
    auto ia = a.impl(), ib = b.impl(), io = res.impl();
    Tape::instance().push([ia, ib, io, m, k, n] {
      const auto* go = out_grad(io);
      if (!go) return;
      if (ia->requires_grad) {
        std::vector<double> ga(m * k, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double g = (*go)[i * n + j];
            if (g == 0.0) continue;
            for (std::size_t kk = 0; kk < k; ++kk) ga[i * k + kk] += g * ib->data[kk * n + j];
          }
        accum(ia, ga);
      }
      if (ib->requires_grad) {
        std::vector<double> gb(k * n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = ia->data[i * k + kk];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) gb[kk * n + j] += av * (*go)[i * n + j];
          }
        accum(ib, gb);
      }
    });
  }
  return res;
}

Tensor transpose2d(const Tensor& a) {
  require_matrix(a, "transpose2d");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  const bool tracked = want_grad({&a});
  Tensor res = make_result({n, m}, std::move(out), "transpose2d", tracked);
  if (tracked) {
    auto ia = a.impl(), io = res.impl();
    Tape::instance().push([ia, io, m, n] {
      const auto* go = out_grad(io);
      if (!go) return;
      std::vector<double> ga(m * n);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] = (*go)[j * m + i];
      accum(ia, ga);
    });
  }
  return res;
}

namespace {

template <typename Fwd, typename BwdA, typename BwdB>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, BwdA bwd_a,
                          BwdB bwd_b) {
  require_same_shape(a, b, op);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.data()[i], b.data()[i]);
  const bool tracked = want_grad({&a, &b});
  Tensor res = make_result(a.shape(), std::move(out), op, tracked);
  if (tracked) {
    auto ia = a.impl(), ib = b.impl(), io = res.impl();
    Tape::instance().push([ia, ib, io, bwd_a, bwd_b] {
      const auto* go = out_grad(io);
      if (!go) return;
      if (ia->requires_grad) {
        std::vector<double> g(go->size());
        for (std::size_t i = 0; i < g.size(); ++i)
          g[i] = (*go)[i] * bwd_a(ia->data[i], ib->data[i]);
        accum(ia, g);
      }
      if (ib->requires_grad) {
        std::vector<double> g(go->size());
        for (std::size_t i = 0; i < g.size(); ++i)
          g[i] = (*go)[i] * bwd_b(ia->data[i], ib->data[i]);
        accum(ib, g);
      }
    });
  }
  return res;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  const bool tracked = want_grad({&a});
  Tensor res = make_result(a.shape(), std::move(out), "scale", tracked);
  if (tracked) {
    auto ia = a.impl(), io = res.impl();
    Tape::instance().push([ia, io, c] {
      const auto* go = out_grad(io);
      if (!go) return;
      std::vector<double> g(go->size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = (*go)[i] * c;
      accum(ia, g);
    });
  }
  return res;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_matrix(x, "add_bias");
  if (bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw std::invalid_argument("add_bias: bias " + shape_str(bias.shape()) +
                                " does not match columns of " + shape_str(x.shape()));
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] + bias.data()[j];
  const bool tracked = want_grad({&x, &bias});
  Tensor res = make_result({m, n}, std::move(out), "add_bias", tracked);
  if (tracked) {
    auto ix = x.impl(), ib = bias.impl(), io = res.impl();
    Tape::instance().push([ix, ib, io, m, n] {
      const auto* go = out_grad(io);
      if (!go) return;
      if (ix->requires_grad) accum(ix, *go);
      if (ib->requires_grad) {
        std::vector<double> g(n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[j] += (*go)[i * n + j];
        accum(ib, g);
      }
    });
  }
  return res;
}

Tensor silu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.data()[i];
    out[i] = v * sigmoid(v);
  }
  const bool tracked = want_grad({&x});
  Tensor res = make_result(x.shape(), std::move(out), "silu", tracked);
  if (tracked) {
    auto ix = x.impl(), io = res.impl();
    Tape::instance().push([ix, io] {
      const auto* go = out_grad(io);
      if (!go) return;
      std::vector<double> g(go->size());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = ix->data[i];
        const double s = sigmoid(v);
        g[i] = (*go)[i] * (s + v * s * (1.0 - s));
      }
      accum(ix, g);
    });
  }
  return res;
}

Tensor softmax_rows(const Tensor& x) {
  require_matrix(x, "softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data().data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(row[j] - mx);
      z += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  const bool tracked = want_grad({&x});
  Tensor res = make_result({m, n}, std::move(out), "softmax_rows", tracked);
  if (tracked) {
    auto ix = x.impl(), io = res.impl();
    Tape::instance().push([ix, io, m, n] {
      const auto* go = out_grad(io);
      if (!go) return;
      std::vector<double> g(m * n);
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += (*go)[i * n + j] * io->data[i * n + j];
        for (std::size_t j = 0; j < n; ++j)
          g[i * n + j] = io->data[i * n + j] * ((*go)[i * n + j] - dot);
      }
      accum(ix, g);
    });
  }
  return res;
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  require_matrix(x, "layer_norm_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gain.rank() != 1 || gain.dim(0) != n || bias.rank() != 1 || bias.dim(0) != n) {
    throw std::invalid_argument("layer_norm_rows: gain/bias must have one entry per column");
  }
  constexpr double kEps = 1e-5;  // constant rows normalize to zero
  std::vector<double> out(m * n);
  auto xhat = std::make_shared<std::vector<double>>(m * n);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double istd = 1.0 / std::sqrt(var + kEps);
    (*inv_std)[i] = istd;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * istd;
      (*xhat)[i * n + j] = h;
      out[i * n + j] = gain.data()[j] * h + bias.data()[j];
    }
  }
  const bool tracked = want_grad({&x, &gain, &bias});
  Tensor res = make_result({m, n}, std::move(out), "layer_norm_rows", tracked);
  if (tracked) {
    auto ix = x.impl(), ig = gain.impl(), ib = bias.impl(), io = res.impl();
    Tape::instance().push([ix, ig, ib, io, xhat, inv_std, m, n] {
      const auto* go = out_grad(io);
      if (!go) return;
      if (ig->requires_grad) {
        std::vector<double> g(n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[j] += (*go)[i * n + j] * (*xhat)[i * n + j];
        accum(ig, g);
      }
      if (ib->requires_grad) {
        std::vector<double> g(n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[j] += (*go)[i * n + j];
        accum(ib, g);
      }
      if (ix->requires_grad) {
        std::vector<double> g(m * n);
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double dh = (*go)[i * n + j] * ig->data[j];
            mean_dh += dh;
            mean_dh_h += dh * (*xhat)[i * n + j];
          }
          mean_dh *= inv_n;
          mean_dh_h *= inv_n;
          for (std::size_t j = 0; j < n; ++j) {
            const double dh = (*go)[i * n + j] * ig->data[j];
            g[i * n + j] = (*inv_std)[i] * (dh - mean_dh - (*xhat)[i * n + j] * mean_dh_h);
          }
        }
        accum(ix, g);
      }
    });
  }
  return res;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  require_matrix(table, "embedding");
  const std::size_t v = table.dim(0), d = table.dim(1), l = ids.size();
  std::vector<double> out(l * d);
  for (std::size_t i = 0; i < l; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside vocab " +
                              std::to_string(v));
    }
    const double* row = table.data().data() + static_cast<std::size_t>(ids[i]) * d;
    std::copy(row, row + d, out.begin() + i * d);
  }
  const bool tracked = want_grad({&table});
  Tensor res = make_result({l, d}, std::move(out), "embedding", tracked);
  if (tracked) {
    auto it = table.impl(), io = res.impl();
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    Tape::instance().push([it, io, ids_copy, d] {
      const auto* go = out_grad(io);
      if (!go) return;
      std::vector<double> g(it->data.size(), 0.0);
      for (std::size_t i = 0; i < ids_copy->size(); ++i) {
        const std::size_t row = static_cast<std::size_t>((*ids_copy)[i]) * d;
        for (std::size_t j = 0; j < d; ++j) g[row + j] += (*go)[i * d + j];
      }
      accum(it, g);
    });
  }
  return res;
}

Tensor cross_entropy_masked(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<std::uint8_t>& mask) {
  require_matrix(logits, "cross_entropy_masked");
  const std::size_t l = logits.dim(0), v = logits.dim(1);
  if (targets.size() != l || mask.size() != l) {
    throw std::invalid_argument("cross_entropy_masked: targets/mask length must match rows");
  }
  std::size_t count = 0;
  for (auto m : mask) count += m != 0;
  if (count == 0) throw std::invalid_argument("cross_entropy_masked: mask selects no positions");

  auto probs = std::make_shared<std::vector<double>>(l * v);
  double nll = 0.0;
  for (std::size_t i = 0; i < l; ++i) {
    const double* row = logits.data().data() + i * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      (*probs)[i * v + j] = std::exp(row[j] - mx);
      z += (*probs)[i * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) (*probs)[i * v + j] /= z;
    if (mask[i]) {
      if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
        throw std::out_of_range("cross_entropy_masked: target outside vocab");
      }
      nll -= row[static_cast<std::size_t>(targets[i])] - mx - std::log(z);
    }
  }
  std::vector<double> out{nll / static_cast<double>(count)};
  const bool tracked = want_grad({&logits});
  Tensor res = make_result({1}, std::move(out), "cross_entropy_masked", tracked);
  if (tracked) {
    auto ix = logits.impl(), io = res.impl();
    auto targets_copy = std::make_shared<std::vector<int>>(targets);
    auto mask_copy = std::make_shared<std::vector<std::uint8_t>>(mask);
    Tape::instance().push([ix, io, probs, targets_copy, mask_copy, l, v, count] {
      const auto* go = out_grad(io);
      if (!go) return;
      const double gscale = (*go)[0] / static_cast<double>(count);
      std::vector<double> g(l * v, 0.0);
      for (std::size_t i = 0; i < l; ++i) {
        if (!(*mask_copy)[i]) continue;
        for (std::size_t j = 0; j < v; ++j) g[i * v + j] = gscale * (*probs)[i * v + j];
        g[i * v + static_cast<std::size_t>((*targets_copy)[i])] -= gscale;
      }
      accum(ix, g);
    });
  }
  return res;
}

namespace {

Tensor reduce_all(const Tensor& x, const char* op, double scale_factor) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  std::vector<double> out{acc * scale_factor};
  const bool tracked = want_grad({&x});
  Tensor res = make_result({1}, std::move(out), op, tracked);
  if (tracked) {
    auto ix = x.impl(), io = res.impl();
    Tape::instance().push([ix, io, scale_factor] {
      const auto* go = out_grad(io);
      if (!go) return;
      std::vector<double> g(ix->data.size(), (*go)[0] * scale_factor);
      accum(ix, g);
    });
  }
  return res;
}

}  // namespace

Tensor sum(const Tensor& x) { return reduce_all(x, "sum", 1.0); }

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw std::invalid_argument("mean: empty tensor");
  return reduce_all(x, "mean", 1.0 / static_cast<double>(x.size()));
}

Tensor mean_over_rows(const Tensor& x) {
  require_matrix(x, "mean_over_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x.data()[i * n + j];
  for (double& v : out) v /= static_cast<double>(m);
  const bool tracked = want_grad({&x});
  Tensor res = make_result({n}, std::move(out), "mean_over_rows", tracked);
  if (tracked) {
    auto ix = x.impl(), io = res.impl();
    Tape::instance().push([ix, io, m, n] {
      const auto* go = out_grad(io);
      if (!go) return;
      std::vector<double> g(m * n);
      const double inv_m = 1.0 / static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] = (*go)[j] * inv_m;
      accum(ix, g);
    });
  }
  return res;
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t width) {
  require_matrix(x, "slice_cols");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (start + width > n) throw std::out_of_range("slice_cols: range exceeds columns");
  std::vector<double> out(m * width);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < width; ++j) out[i * width + j] = x.data()[i * n + start + j];
  const bool tracked = want_grad({&x});
  Tensor res = make_result({m, width}, std::move(out), "slice_cols", tracked);
  if (tracked) {
    auto ix = x.impl(), io = res.impl();
    Tape::instance().push([ix, io, start, width, m, n] {
      const auto* go = out_grad(io);
      if (!go) return;
      std::vector<double> g(m * n, 0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < width; ++j) g[i * n + start + j] = (*go)[i * width + j];
      accum(ix, g);
    });
  }
  return res;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const std::size_t m = parts[0].dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.dim(0) != m) throw std::invalid_argument("concat_cols: row counts differ");
    total += p.dim(1);
  }
  std::vector<double> out(m * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + off + j] = p.data()[i * w + j];
    off += w;
  }
  bool tracked = false;
  if (Tape::instance().recording()) {
    for (const auto& p : parts) tracked = tracked || p.requires_grad();
  }
  Tensor res = make_result({m, total}, std::move(out), "concat_cols", tracked);
  if (tracked) {
    std::vector<std::shared_ptr<TensorImpl>> impls;
    impls.reserve(parts.size());
    for (const auto& p : parts) impls.push_back(p.impl());
    auto io = res.impl();
    Tape::instance().push([impls, io, m, total] {
      const auto* go = out_grad(io);
      if (!go) return;
      std::size_t off = 0;
      for (const auto& ip : impls) {
        const std::size_t w = ip->data.size() / m;
        if (ip->requires_grad) {
          std::vector<double> g(m * w);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) g[i * w + j] = (*go)[i * total + off + j];
          accum(ip, g);
        }
        off += w;
      }
    });
  }
  return res;
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  require_matrix(x, "gather_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(rows.size() * n);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m) throw std::out_of_range("gather_rows: row index");
    std::copy(x.data().begin() + rows[i] * n, x.data().begin() + (rows[i] + 1) * n,
              out.begin() + i * n);
  }
  const bool tracked = want_grad({&x});
  Tensor res = make_result({rows.size(), n}, std::move(out), "gather_rows", tracked);
  if (tracked) {
    auto ix = x.impl(), io = res.impl();
    auto rows_copy = std::make_shared<std::vector<std::size_t>>(rows);
    Tape::instance().push([ix, io, rows_copy, m, n] {
      const auto* go = out_grad(io);
      if (!go) return;
      std::vector<double> g(m * n, 0.0);
      for (std::size_t i = 0; i < rows_copy->size(); ++i)
        for (std::size_t j = 0; j < n; ++j) g[(*rows_copy)[i] * n + j] += (*go)[i * n + j];
      accum(ix, g);
    });
  }
  return res;
}

Tensor scatter_add_rows(const Tensor& x, const std::vector<std::size_t>& rows,
                        std::size_t out_rows) {
  require_matrix(x, "scatter_add_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (rows.size() != m) throw std::invalid_argument("scatter_add_rows: one index per row");
  std::vector<double> out(out_rows * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    if (rows[i] >= out_rows) throw std::out_of_range("scatter_add_rows: row index");
    for (std::size_t j = 0; j < n; ++j) out[rows[i] * n + j] += x.data()[i * n + j];
  }
  const bool tracked = want_grad({&x});
  Tensor res = make_result({out_rows, n}, std::move(out), "scatter_add_rows", tracked);
  if (tracked) {
    auto ix = x.impl(), io = res.impl();
    auto rows_copy = std::make_shared<std::vector<std::size_t>>(rows);
    Tape::instance().push([ix, io, rows_copy, n] {
      const auto* go = out_grad(io);
      if (!go) return;
      std::vector<double> g(ix->data.size());
      for (std::size_t i = 0; i < rows_copy->size(); ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] = (*go)[(*rows_copy)[i] * n + j];
      accum(ix, g);
    });
  }
  return res;
}

Tensor row_scale(const Tensor& x, const Tensor& s) {
  require_matrix(x, "row_scale");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (s.rank() != 1 || s.dim(0) != m) {
    throw std::invalid_argument("row_scale: one scale per row required");
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] * s.data()[i];
  const bool tracked = want_grad({&x, &s});
  Tensor res = make_result({m, n}, std::move(out), "row_scale", tracked);
  if (tracked) {
    auto ix = x.impl(), is = s.impl(), io = res.impl();
    Tape::instance().push([ix, is, io, m, n] {
      const auto* go = out_grad(io);
      if (!go) return;
      if (ix->requires_grad) {
        std::vector<double> g(m * n);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] = (*go)[i * n + j] * is->data[i];
        accum(ix, g);
      }
      if (is->requires_grad) {
        std::vector<double> g(m, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[i] += (*go)[i * n + j] * ix->data[i * n + j];
        accum(is, g);
      }
    });
  }
  return res;
}

Tensor gather_elems(const Tensor& x,
                    const std::vector<std::pair<std::size_t, std::size_t>>& idx) {
  require_matrix(x, "gather_elems");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i].first >= m || idx[i].second >= n) throw std::out_of_range("gather_elems: index");
    out[i] = x.data()[idx[i].first * n + idx[i].second];
  }
  const bool tracked = want_grad({&x});
  Tensor res = make_result({idx.size()}, std::move(out), "gather_elems", tracked);
  if (tracked) {
    auto ix = x.impl(), io = res.impl();
    auto idx_copy = std::make_shared<std::vector<std::pair<std::size_t, std::size_t>>>(idx);
    Tape::instance().push([ix, io, idx_copy, n] {
      const auto* go = out_grad(io);
      if (!go) return;
      std::vector<double> g(ix->data.size(), 0.0);
      for (std::size_t i = 0; i < idx_copy->size(); ++i)
        g[(*idx_copy)[i].first * n + (*idx_copy)[i].second] += (*go)[i];
      accum(ix, g);
    });
  }
  return res;
}

Tensor topk_masked_softmax(const Tensor& logits, std::size_t k,
                           std::vector<std::vector<std::size_t>>* selected) {
  require_matrix(logits, "topk_masked_softmax");
  const std::size_t l = logits.dim(0), e = logits.dim(1);
  if (k == 0 || k > e) throw std::invalid_argument("topk_masked_softmax: k must be in [1, E]");
  if (selected) selected->assign(l, {});

  auto sel = std::make_shared<std::vector<std::vector<std::size_t>>>(l);
  std::vector<double> out(l * e, 0.0);
  for (std::size_t i = 0; i < l; ++i) {
    const double* row = logits.data().data() + i * e;
    std::vector<std::size_t> order(e);
    std::iota(order.begin(), order.end(), 0);
    // Descending logit, ties to the lower expert index.
    std::stable_sort(order.begin(), order.end(),
                     [row](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    order.resize(k);
    (*sel)[i] = order;
    double mx = row[order[0]];
    double z = 0.0;
    for (std::size_t j : order) z += std::exp(row[j] - mx);
    for (std::size_t j : order) out[i * e + j] = std::exp(row[j] - mx) / z;
    if (selected) (*selected)[i] = order;
  }
  const bool tracked = want_grad({&logits});
  Tensor res = make_result({l, e}, std::move(out), "topk_masked_softmax", tracked);
  if (tracked) {
    auto ix = logits.impl(), io = res.impl();
    Tape::instance().push([ix, io, sel, l, e] {
      const auto* go = out_grad(io);
      if (!go) return;
      std::vector<double> g(l * e, 0.0);
      for (std::size_t i = 0; i < l; ++i) {
        double dot = 0.0;
        for (std::size_t j : (*sel)[i]) dot += (*go)[i * e + j] * io->data[i * e + j];
        for (std::size_t j : (*sel)[i])
          g[i * e + j] = io->data[i * e + j] * ((*go)[i * e + j] - dot);
      }
      accum(ix, g);
    });
  }
  return res;
}

}  // namespace moetune
