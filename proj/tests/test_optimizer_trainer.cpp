#include <cmath>
#include <random>

#include <doctest.h>

#include "moetune/dataset.hpp"
#include "moetune/model.hpp"
#include "moetune/optimizer.hpp"
#include "moetune/trainer.hpp"

using namespace moetune;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 24;
  cfg.vocab_size = 260;
  cfg.max_seq_len = 256;
  return cfg;
}

}  // namespace

TEST_CASE("AdamW: zero gradient and zero decay leave parameters unchanged") {
  auto p = Tensor::from_data({2}, {1.0, -2.0}, true);
  AdamW opt({{"p", p}}, {});
  opt.step(0.1);
  CHECK(p.data() == std::vector<double>{1.0, -2.0});
}

TEST_CASE("AdamW: first step from zero moments moves by ~lr against the gradient sign") {
  PrecisionGuard g(Precision::f64);
  auto p = Tensor::from_data({1}, {0.0}, true);
  p.accumulate_grad({2.5});
  AdamW opt({{"p", p}}, {});
  opt.step(0.01);
  // mhat = g, vhat = g^2, update = -lr * g / (|g| + eps) ~= -lr * sign(g).
  CHECK(p.at(0) == doctest::Approx(-0.01).epsilon(1e-6));
}

TEST_CASE("AdamW: decoupled decay shrinks parameters by (1 - lr*wd)") {
  PrecisionGuard g(Precision::f64);
  auto p = Tensor::from_data({1}, {4.0}, true);
  AdamW::Config cfg;
  cfg.weight_decay = 0.1;
  AdamW opt({{"p", p}}, cfg);
  opt.step(0.5);
  CHECK(p.at(0) == doctest::Approx(4.0 * (1.0 - 0.5 * 0.1)).epsilon(1e-12));
}

TEST_CASE("AdamW honors the freeze mask") {
  auto p = Tensor::from_data({1}, {1.0}, true);
  auto q = Tensor::from_data({1}, {1.0}, true);
  p.accumulate_grad({1.0});
  q.accumulate_grad({1.0});
  std::map<std::string, bool> freeze{{"p", true}, {"q", false}};
  AdamW opt({{"p", p}, {"q", q}}, {}, &freeze);
  opt.step(0.1);
  CHECK(p.at(0) == 1.0);
  CHECK(q.at(0) != 1.0);
}

TEST_CASE("cosine schedule decays from base toward zero after warmup") {
  CHECK(cosine_lr(1.0, 0, 100, 0) == doctest::Approx(1.0));
  CHECK(cosine_lr(1.0, 50, 100, 0) == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(cosine_lr(1.0, 99, 100, 0) < 0.01);
  CHECK(cosine_lr(1.0, 0, 100, 10) == doctest::Approx(0.1));
  CHECK(cosine_lr(1.0, 9, 100, 10) == doctest::Approx(1.0));
}

TEST_CASE("zero-epoch pretraining leaves parameters at initialization") {
  std::mt19937_64 rng(3);
  auto model = Transformer::make_dense(tiny_config(), rng);
  std::vector<std::vector<double>> before;
  for (const auto& [name, t] : model.named_parameters()) before.push_back(t.data());
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.batch_size = 2;
  cfg.cutoff_len = 32;
  auto res = continual_pretrain(model, {"abc", "def"}, cfg);
  CHECK(res.steps_run == 0);
  std::size_t i = 0;
  for (const auto& [name, t] : model.named_parameters()) CHECK(t.data() == before[i++]);
}

TEST_CASE("same seed gives bitwise-identical pretraining runs") {
  auto corpus = synth_pretrain_corpus(8, 4);
  auto run = [&](unsigned long long seed) {
    std::mt19937_64 rng(seed);
    auto model = Transformer::make_dense(tiny_config(), rng);
    TrainConfig cfg;
    cfg.max_steps = 5;
    cfg.batch_size = 2;
    cfg.cutoff_len = 48;
    cfg.learning_rate = 1e-3;
    cfg.seed = seed;
    auto res = continual_pretrain(model, corpus, cfg);
    std::vector<std::vector<double>> params;
    for (const auto& [name, t] : model.named_parameters()) params.push_back(t.data());
    return std::make_pair(params, res.curve);
  };
  auto a = run(11);
  auto b = run(11);
  CHECK(a.first == b.first);
  REQUIRE(a.second.size() == b.second.size());
  for (std::size_t i = 0; i < a.second.size(); ++i) {
    CHECK(a.second[i].combined == b.second[i].combined);
  }
}

TEST_CASE("gradient accumulation is equivalent to a larger batch") {
  // The batch loss is a token-weighted mean, so accumulation (an equal-weight
  // mean of micro-batch means) matches exactly only when every packed
  // sequence carries the same token count. One document of 8 * (cutoff - 2)
  // characters packs into exactly eight full-length sequences.
  PrecisionGuard g(Precision::f64);
  std::string doc;
  for (const auto& d : synth_pretrain_corpus(8, 4)) doc += d;
  doc.resize(8 * 46);
  std::vector<std::string> corpus{doc};
  auto run = [&](std::size_t batch, std::size_t accum) {
    std::mt19937_64 rng(5);
    auto model = Transformer::make_dense(tiny_config(), rng);
    TrainConfig cfg;
    cfg.max_steps = 3;
    cfg.batch_size = batch;
    cfg.grad_accum_steps = accum;
    cfg.cutoff_len = 48;
    cfg.learning_rate = 1e-3;
    cfg.seed = 5;
    return continual_pretrain(model, corpus, cfg).curve;
  };
  auto big = run(4, 1);
  auto split = run(2, 2);
  REQUIRE(big.size() == split.size());
  for (std::size_t i = 0; i < big.size(); ++i) {
    CHECK(std::abs(big[i].combined - split[i].combined) /
              std::max(std::abs(big[i].combined), 1e-8) < 1e-9);
  }
}

TEST_CASE("moe_tune freezes the non-MoE parameters exactly") {
  std::mt19937_64 rng(7);
  auto dense = Transformer::make_dense(tiny_config(), rng);
  auto moe = upcycle_from_dense(dense, 4, 2, rng);
  auto data = synth_instruction_dataset(4, 7);

  std::map<std::string, std::vector<double>> before;
  for (const auto& [name, t] : moe.named_parameters()) before[name] = t.data();

  TrainConfig cfg;
  cfg.stage = Stage::moe_tune;
  cfg.max_steps = 10;
  cfg.batch_size = 2;
  cfg.cutoff_len = 224;
  cfg.learning_rate = 1e-3;
  cfg.seed = 7;
  moe_tune(moe, data, cfg);

  bool expert_changed = false, router_changed = false;
  for (const auto& [name, t] : moe.named_parameters()) {
    if (moe.is_frozen(name)) {
      CHECK(t.data() == before[name]);
    } else if (t.data() != before[name]) {
      if (name.find(".ffn.router") != std::string::npos) router_changed = true;
      if (name.find(".ffn.experts.") != std::string::npos) expert_changed = true;
    }
  }
  CHECK(expert_changed);
  CHECK(router_changed);
}

TEST_CASE("moe_tune with alpha=0 matches task-loss-only trajectories") {
  std::mt19937_64 rng(9);
  auto dense = Transformer::make_dense(tiny_config(), rng);
  auto data = synth_instruction_dataset(4, 9);
  auto run = [&](double alpha) {
    std::mt19937_64 urng(10);
    auto moe = upcycle_from_dense(dense, 4, 2, urng);
    TrainConfig cfg;
    cfg.stage = Stage::moe_tune;
    cfg.max_steps = 4;
    cfg.batch_size = 2;
    cfg.cutoff_len = 224;
    cfg.learning_rate = 1e-3;
    cfg.alpha = alpha;
    cfg.seed = 10;
    return moe_tune(moe, data, cfg).curve;
  };
  auto with_zero = run(0.0);
  auto with_alpha = run(0.01);
  for (std::size_t i = 0; i < with_zero.size(); ++i) {
    CHECK(with_zero[i].combined == doctest::Approx(with_zero[i].task_loss).epsilon(1e-12));
  }
  // Same data order, so the first step's task loss agrees before updates split.
  CHECK(with_zero[0].task_loss == doctest::Approx(with_alpha[0].task_loss).epsilon(1e-12));
}

TEST_CASE("moe_tune rejects a dense model and stage mismatches") {
  std::mt19937_64 rng(13);
  auto dense = Transformer::make_dense(tiny_config(), rng);
  auto data = synth_instruction_dataset(2, 13);
  TrainConfig cfg;
  cfg.stage = Stage::moe_tune;
  cfg.max_steps = 1;
  cfg.batch_size = 1;
  cfg.cutoff_len = 224;
  CHECK_THROWS(moe_tune(dense, data, cfg));
  auto moe = upcycle_from_dense(dense, 2, 1, rng);
  cfg.stage = Stage::continual_pretrain;
  CHECK_THROWS(moe_tune(moe, data, cfg));
}

TEST_CASE("full-scale preset is recorded") {
  auto pre = fullscale_defaults(Stage::continual_pretrain);
  CHECK(pre.learning_rate == 1e-5);
  CHECK(pre.batch_size == 64);
  CHECK(pre.grad_accum_steps == 16);
  CHECK(pre.epochs == 2);
  CHECK(pre.cutoff_len == 2048);
  auto tune = fullscale_defaults(Stage::moe_tune);
  CHECK(tune.batch_size == 8);
  CHECK(tune.grad_accum_steps == 8);
  CHECK(tune.epochs == 3);
}
