#include <cmath>
#include <random>

#include <doctest.h>

#include "moetune/autodiff.hpp"
#include "moetune/kernels.hpp"
#include "moetune/tensor.hpp"

using namespace moetune;

TEST_CASE("softmax of equal logits is uniform") {
  auto x = Tensor::from_data({1, 2}, {0.0, 0.0});
  auto y = softmax_rows(x);
  CHECK(y.at(0) == doctest::Approx(0.5));
  CHECK(y.at(1) == doctest::Approx(0.5));
}

TEST_CASE("softmax matches independent scalar computation") {
  // e^2 / (e^2 + e^3) and e^3 / (e^2 + e^3), computed by hand.
  auto y = softmax_rows(Tensor::from_data({1, 2}, {2.0, 3.0}));
  CHECK(y.at(0) == doctest::Approx(0.26894).epsilon(1e-4));
  CHECK(y.at(1) == doctest::Approx(0.73106).epsilon(1e-4));
}

TEST_CASE("softmax rows are probability vectors") {
  std::mt19937_64 rng(11);
  auto x = Tensor::randn({5, 7}, rng, 3.0);
  auto y = softmax_rows(x);
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      CHECK(y.at(r, c) >= 0.0);
      s += y.at(r, c);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("layer norm of a constant vector is zero") {
  auto x = Tensor::full({1, 4}, 3.25);
  auto gain = Tensor::full({4}, 1.0);
  auto bias = Tensor::zeros({4});
  auto y = layer_norm_rows(x, gain, bias);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.at(i) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("matmul shape mismatch throws") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 3});
  CHECK_THROWS(matmul(a, b));
}

TEST_CASE("non-finite output is rejected") {
  auto x = Tensor::from_data({1, 1}, {1e308});
  CHECK_THROWS(mul(x, x));
}

TEST_CASE("cross entropy of hand-set probabilities") {
  // Rows assign probability 0.5, 0.25, 0.125 to their targets:
  // -(ln 0.5 + ln 0.25 + ln 0.125)/3 = 1.3863...
  PrecisionGuard g(Precision::f64);
  auto make_row = [](double p) {
    // Two-class logits (log p, log(1-p)) give softmax (p, 1-p).
    return std::vector<double>{std::log(p), std::log(1.0 - p)};
  };
  std::vector<double> data;
  for (double p : {0.5, 0.25, 0.125}) {
    auto row = make_row(p);
    data.insert(data.end(), row.begin(), row.end());
  }
  auto logits = Tensor::from_data({3, 2}, data);
  auto loss = cross_entropy_masked(logits, {0, 0, 0}, {1, 1, 1});
  CHECK(loss.item() == doctest::Approx(-(std::log(0.5) + std::log(0.25) + std::log(0.125)) / 3.0)
                           .epsilon(1e-9));
}

TEST_CASE("cross entropy with empty mask throws") {
  auto logits = Tensor::zeros({2, 3});
  CHECK_THROWS(cross_entropy_masked(logits, {0, 1}, {0, 0}));
}

TEST_CASE("top-k masked softmax selects the k largest with exact zeros elsewhere") {
  std::vector<std::vector<std::size_t>> sel;
  auto y = topk_masked_softmax(Tensor::from_data({1, 4}, {1.0, 2.0, 3.0, 0.0}), 2, &sel);
  REQUIRE(sel.size() == 1);
  CHECK(sel[0] == std::vector<std::size_t>{2, 1});
  CHECK(y.at(0, 2) == doctest::Approx(0.73106).epsilon(1e-4));
  CHECK(y.at(0, 1) == doctest::Approx(0.26894).epsilon(1e-4));
  CHECK(y.at(0, 0) == 0.0);
  CHECK(y.at(0, 3) == 0.0);
}

TEST_CASE("top-k softmax is shift invariant") {
  auto base = Tensor::from_data({1, 4}, {0.3, -1.2, 0.9, 0.1});
  auto shifted = Tensor::from_data({1, 4}, {5.3, 3.8, 5.9, 5.1});
  std::vector<std::vector<std::size_t>> sa, sb;
  auto ya = topk_masked_softmax(base, 2, &sa);
  auto yb = topk_masked_softmax(shifted, 2, &sb);
  CHECK(sa == sb);
  for (std::size_t i = 0; i < 4; ++i) CHECK(ya.at(0, i) == doctest::Approx(yb.at(0, i)).epsilon(1e-6));
}

TEST_CASE("top-k tie-break picks the lower expert index") {
  std::vector<std::vector<std::size_t>> sel;
  topk_masked_softmax(Tensor::from_data({1, 3}, {1.0, 1.0, 1.0}), 2, &sel);
  CHECK(sel[0] == std::vector<std::size_t>{0, 1});
}

TEST_CASE("every differentiable kernel passes a finite-difference check") {
  PrecisionGuard g(Precision::f64);
  std::mt19937_64 rng(23);
  auto a = Tensor::randn({3, 4}, rng, 0.5, true);
  auto b = Tensor::randn({4, 3}, rng, 0.5, true);
  auto bias = Tensor::randn({4}, rng, 0.5, true);
  auto gain = Tensor::randn({4}, rng, 0.2, true);
  // Push gain away from zero so layer-norm gradients are well-scaled.
  for (auto& v : gain.data()) v += 1.0;

  auto loss_fn = [&]() {
    auto h = matmul(a, b);        // [3,3]
    auto t = transpose2d(h);      // [3,3]
    auto s = silu(add(h, t));
    auto sm = softmax_rows(matmul(s, a));  // [3,4]
    auto ln = layer_norm_rows(add_bias(sm, bias), gain, bias);
    return mean(mul(ln, ln));
  };
  double err = finite_diff_check(loss_fn, {a, b, bias, gain}, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("structured kernels pass a finite-difference check") {
  PrecisionGuard g(Precision::f64);
  std::mt19937_64 rng(29);
  auto x = Tensor::randn({4, 6}, rng, 0.7, true);
  auto s = Tensor::randn({4}, rng, 0.5, true);
  auto loss_fn = [&]() {
    auto parts = concat_cols({slice_cols(x, 0, 3), slice_cols(x, 3, 3)});
    auto gathered = gather_rows(parts, {2, 0, 1, 3});
    auto scattered = scatter_add_rows(gathered, {1, 1, 0, 2}, 3);
    auto scaled = row_scale(gather_rows(scattered, {0, 1, 2, 0}), s);
    auto picked = gather_elems(scaled, {{0, 1}, {1, 2}, {3, 5}});
    return sum(mul(picked, picked));
  };
  CHECK(finite_diff_check(loss_fn, {x, s}, 1e-5) < 1e-6);
}

TEST_CASE("embedding and mean_over_rows gradients check out") {
  PrecisionGuard g(Precision::f64);
  std::mt19937_64 rng(31);
  auto table = Tensor::randn({5, 3}, rng, 0.8, true);
  auto loss_fn = [&]() {
    auto e = embedding(table, {0, 2, 2, 4});
    return sum(mul(mean_over_rows(e), mean_over_rows(e)));
  };
  CHECK(finite_diff_check(loss_fn, {table}, 1e-5) < 1e-6);
}

TEST_CASE("forward passes are bitwise deterministic") {
  std::mt19937_64 rng1(7), rng2(7);
  auto a1 = Tensor::randn({4, 4}, rng1, 1.0);
  auto a2 = Tensor::randn({4, 4}, rng2, 1.0);
  auto y1 = softmax_rows(matmul(a1, a1));
  auto y2 = softmax_rows(matmul(a2, a2));
  CHECK(y1.data() == y2.data());
}
