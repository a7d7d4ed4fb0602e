#include <random>

#include <benchmark/benchmark.h>

#include "moetune/autodiff.hpp"
#include "moetune/kernels.hpp"
#include "moetune/losses.hpp"
#include "moetune/model.hpp"

using namespace moetune;

namespace {

ModelConfig bench_config(std::size_t experts, std::size_t k) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 64;
  cfg.n_heads = 4;
  cfg.d_ff = 96;
  cfg.vocab_size = 260;
  cfg.max_seq_len = 256;
  cfg.total_experts = experts;
  cfg.active_experts = k;
  return cfg;
}

std::vector<int> random_tokens(std::size_t n, unsigned long long seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> d(0, 255);
  std::vector<int> out(n);
  for (auto& t : out) t = d(rng);
  return out;
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(1);
  Tensor a = Tensor::randn({n, n}, rng, 1.0, false);
  Tensor b = Tensor::randn({n, n}, rng, 1.0, false);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

static void BM_SoftmaxRows(benchmark::State& state) {
  std::mt19937_64 rng(2);
  Tensor x = Tensor::randn({256, static_cast<std::size_t>(state.range(0))}, rng, 1.0, false);
  for (auto _ : state) benchmark::DoNotOptimize(softmax_rows(x));
}
BENCHMARK(BM_SoftmaxRows)->Arg(8)->Arg(260);

static void BM_TopKMaskedSoftmax(benchmark::State& state) {
  std::mt19937_64 rng(3);
  Tensor logits = Tensor::randn({256, 8}, rng, 1.0, false);
  const auto k = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(topk_masked_softmax(logits, k));
}
BENCHMARK(BM_TopKMaskedSoftmax)->Arg(1)->Arg(2)->Arg(4);

static void BM_Gate(benchmark::State& state) {
  std::mt19937_64 rng(4);
  auto dense = Transformer::make_dense(bench_config(1, 1), rng);
  auto moe = upcycle_from_dense(dense, 8, 2, rng);
  Tensor x = Tensor::randn({64}, rng, 1.0, false);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(gate(x, moe.blocks_[0].ffn, 2));
}
BENCHMARK(BM_Gate);

static void BM_DenseForward(benchmark::State& state) {
  std::mt19937_64 rng(5);
  auto model = Transformer::make_dense(bench_config(1, 1), rng);
  auto tokens = random_tokens(static_cast<std::size_t>(state.range(0)), 6);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(tokens));
  state.SetItemsProcessed(state.iterations() * tokens.size());
}
BENCHMARK(BM_DenseForward)->Arg(32)->Arg(128);

static void BM_MoeForward(benchmark::State& state) {
  std::mt19937_64 rng(7);
  auto dense = Transformer::make_dense(bench_config(1, 1), rng);
  auto moe = upcycle_from_dense(dense, 8, static_cast<std::size_t>(state.range(0)), rng);
  auto tokens = random_tokens(128, 8);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(moe.forward(tokens));
  state.SetItemsProcessed(state.iterations() * tokens.size());
}
BENCHMARK(BM_MoeForward)->Arg(1)->Arg(2)->Arg(4);

static void BM_TrainStepBackward(benchmark::State& state) {
  std::mt19937_64 rng(9);
  auto dense = Transformer::make_dense(bench_config(1, 1), rng);
  auto moe = upcycle_from_dense(dense, 8, 2, rng);
  auto tokens = random_tokens(64, 10);
  for (auto _ : state) {
    auto fr = moe.forward(tokens);
    auto balance = balance_loss(collect_balance_stats({&fr}, 8));
    backward(balance);
    benchmark::DoNotOptimize(balance.item());
  }
}
BENCHMARK(BM_TrainStepBackward);

BENCHMARK_MAIN();
