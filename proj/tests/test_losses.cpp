#include <cmath>
#include <random>

#include <doctest.h>

#include "moetune/autodiff.hpp"
#include "moetune/kernels.hpp"
#include "moetune/losses.hpp"
#include "moetune/model.hpp"

using namespace moetune;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 24;
  cfg.vocab_size = 32;
  cfg.max_seq_len = 16;
  return cfg;
}

Transformer uniform_model() {
  // Zero output projection makes every logit row constant, i.e. a uniform
  // predictive distribution over the vocabulary.
  std::mt19937_64 rng(1);
  auto model = Transformer::make_dense(tiny_config(), rng);
  for (auto& v : model.out_proj_.data()) v = 0.0;
  return model;
}

BalanceStats make_stats(std::vector<double> f, std::vector<double> p) {
  BalanceStats s;
  s.layer = 0;
  s.token_count = 100;
  s.dispatch_fraction = Tensor::from_data({f.size()}, f);
  s.mean_probability = Tensor::from_data({p.size()}, p);
  return s;
}

}  // namespace

TEST_CASE("adapt loss of the uniform model is ln(vocab)") {
  auto model = uniform_model();
  auto loss = adapt_loss(model, {{1, 2, 3, 4}, {5, 6, 7}});
  CHECK(loss.item() == doctest::Approx(std::log(32.0)).epsilon(1e-6));
}

TEST_CASE("adapt loss rejects an empty batch") {
  auto model = uniform_model();
  CHECK_THROWS(adapt_loss(model, {}));
}

TEST_CASE("task loss averages the two span NLLs") {
  std::mt19937_64 rng(2);
  auto model = Transformer::make_dense(tiny_config(), rng);
  SpanLabeledBatch batch;
  batch.tokens = {{1, 2, 3, 4, 5, 6}};
  batch.span_tags = {{SpanTag::prompt, SpanTag::detection, SpanTag::detection,
                      SpanTag::explanation, SpanTag::explanation, SpanTag::padding}};
  auto fr = model.forward(batch.tokens[0]);

  // Independent recomputation of each span's mean NLL via the kernel.
  std::vector<int> targets{2, 3, 4, 5, 6, 0};
  auto nll_of = [&](SpanTag tag) {
    std::vector<std::uint8_t> mask(6, 0);
    for (std::size_t i = 0; i < 6; ++i) mask[i] = batch.span_tags[0][i] == tag ? 1 : 0;
    return cross_entropy_masked(fr.logits, targets, mask).item();
  };
  const double expected = (nll_of(SpanTag::detection) + nll_of(SpanTag::explanation)) / 2.0;
  CHECK(task_loss(model, batch).item() == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("task loss equals adapt loss on a degenerate two-copy batch") {
  // Two identical sequences, one tagged all-detection and one all-explanation:
  // both span means equal the plain next-token NLL of that sequence.
  std::mt19937_64 rng(3);
  auto model = Transformer::make_dense(tiny_config(), rng);
  std::vector<int> seq{4, 9, 2, 7};
  SpanLabeledBatch batch;
  batch.tokens = {seq, seq};
  batch.span_tags = {
      {SpanTag::detection, SpanTag::detection, SpanTag::detection, SpanTag::padding},
      {SpanTag::explanation, SpanTag::explanation, SpanTag::explanation, SpanTag::padding}};
  CHECK(task_loss(model, batch).item() ==
        doctest::Approx(adapt_loss(model, {seq}).item()).epsilon(1e-9));
}

TEST_CASE("task loss requires both spans") {
  std::mt19937_64 rng(4);
  auto model = Transformer::make_dense(tiny_config(), rng);
  SpanLabeledBatch batch;
  batch.tokens = {{1, 2, 3}};
  batch.span_tags = {{SpanTag::detection, SpanTag::detection, SpanTag::padding}};
  CHECK_THROWS(task_loss(model, batch));
}

TEST_CASE("balance loss: uniform routing gives exactly 1 per layer") {
  auto s = make_stats(std::vector<double>(8, 0.125), std::vector<double>(8, 0.125));
  CHECK(balance_loss({s}).item() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(balance_loss({s, s}).item() == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("balance loss: concentrated dispatch hand example is 1.8") {
  PrecisionGuard g(Precision::f64);
  auto s = make_stats({1.0, 0.0}, {0.9, 0.1});
  CHECK(balance_loss({s}).item() == doctest::Approx(1.8).epsilon(1e-9));
}

TEST_CASE("balance loss with F = P never dips below 1 on the simplex") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int draw = 0; draw < 1000; ++draw) {
    std::vector<double> f(8);
    double total = 0.0;
    for (auto& v : f) total += (v = -std::log(u(rng)));  // Dirichlet(1) sample
    for (auto& v : f) v /= total;
    auto s = make_stats(f, f);
    CHECK(balance_loss({s}).item() >= 1.0 - 1e-9);
  }
}

TEST_CASE("balance loss is permutation equivariant") {
  auto s = make_stats({0.5, 0.3, 0.15, 0.05}, {0.4, 0.3, 0.2, 0.1});
  auto p = make_stats({0.05, 0.3, 0.5, 0.15}, {0.1, 0.3, 0.4, 0.2});
  CHECK(balance_loss({s}).item() == doctest::Approx(balance_loss({p}).item()).epsilon(1e-12));
}

TEST_CASE("balance loss rejects an empty layer set") {
  CHECK_THROWS(balance_loss({}));
}

TEST_CASE("collect_balance_stats: F sums to 1 and P entries lie in [0,1]") {
  std::mt19937_64 rng(9);
  auto dense = Transformer::make_dense(tiny_config(), rng);
  auto moe = upcycle_from_dense(dense, 4, 2, rng);
  auto fr1 = moe.forward({1, 2, 3, 4, 5});
  auto fr2 = moe.forward({9, 8, 7});
  auto stats = collect_balance_stats({&fr1, &fr2}, 4);
  REQUIRE(stats.size() == 2);  // two MoE layers
  for (const auto& s : stats) {
    CHECK(s.token_count == 8);
    double fs = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      fs += s.dispatch_fraction.at(i);
      CHECK(s.mean_probability.at(i) >= 0.0);
      CHECK(s.mean_probability.at(i) <= 1.0);
    }
    CHECK(fs == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("combined loss arithmetic") {
  PrecisionGuard g(Precision::f64);
  auto task = Tensor::scalar(0.5);
  auto balance = Tensor::scalar(1.8);
  CHECK(combined_loss(task, balance, 0.0).item() == doctest::Approx(0.5));
  CHECK(combined_loss(task, balance, 0.01).item() == doctest::Approx(0.518).epsilon(1e-12));
  CHECK_THROWS(combined_loss(task, balance, -0.1));
}

TEST_CASE("combined-loss gradient w.r.t. the router passes finite differences") {
  PrecisionGuard g(Precision::f64);
  std::mt19937_64 rng(11);
  ModelConfig cfg = tiny_config();
  auto dense = Transformer::make_dense(cfg, rng);
  auto moe = upcycle_from_dense(dense, 4, 2, rng);

  SpanLabeledBatch batch;
  batch.tokens = {{1, 5, 9, 13, 2, 6}};
  batch.span_tags = {{SpanTag::prompt, SpanTag::detection, SpanTag::detection,
                      SpanTag::explanation, SpanTag::explanation, SpanTag::padding}};

  std::vector<Tensor> routers;
  for (const auto& [name, t] : moe.named_parameters()) {
    if (name.find(".ffn.router") != std::string::npos) routers.push_back(t);
  }
  REQUIRE(routers.size() == 2);

  auto loss_fn = [&]() {
    auto fr = moe.forward(batch.tokens[0]);
    auto task = task_loss_from_logits({fr.logits}, batch);
    auto balance = balance_loss(collect_balance_stats({&fr}, 4));
    return combined_loss(task, balance, 0.01);
  };
  CHECK(finite_diff_check(loss_fn, routers, 1e-5, 24, 123) < 1e-6);
}
