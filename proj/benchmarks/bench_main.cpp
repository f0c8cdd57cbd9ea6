#include <benchmark/benchmark.h>

#include <random>

#include "clab/compress.hpp"
#include "clab/distill.hpp"
#include "clab/tinyformer.hpp"

namespace {

using namespace clab;

ModelConfig toy() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_model = 64;
  c.d_ff = 256;
  c.vocab_size = 256;
  c.context_len = 64;
  return c;
}

std::vector<Token> tokens(std::size_t n) {
  std::mt19937_64 rng(1);
  std::vector<Token> t(n);
  for (auto& x : t) x = static_cast<Token>(rng() % 256);
  return t;
}

void BM_Forward(benchmark::State& state) {
  const auto m = init_model<float>(toy(), 1);
  const auto t = tokens(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(forward(m, t, ForwardOptions{false}));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Forward)->Arg(16)->Arg(64);

void BM_QuantizedForward(benchmark::State& state) {
  const auto q = quantize_model(init_model<float>(toy(), 1), static_cast<int>(state.range(0)));
  const auto t = tokens(64);
  for (auto _ : state) benchmark::DoNotOptimize(q.forward(t, ForwardOptions{false}));
}
BENCHMARK(BM_QuantizedForward)->Arg(8)->Arg(4);

void BM_QuantizeModel(benchmark::State& state) {
  const auto m = init_model<float>(toy(), 1);
  for (auto _ : state) benchmark::DoNotOptimize(quantize_model(m, 8));
}
BENCHMARK(BM_QuantizeModel);

void BM_Prune24(benchmark::State& state) {
  const auto m = init_model<float>(toy(), 1);
  for (auto _ : state) benchmark::DoNotOptimize(prune_model_2_4(m));
}
BENCHMARK(BM_Prune24);

void BM_Backward(benchmark::State& state) {
  const auto m = init_model<double>(toy(), 1);
  const auto t = tokens(65);
  const std::span<const Token> in(t.data(), 64), tgt(t.data() + 1, 64);
  const CrossEntropyLoss loss{{tgt.begin(), tgt.end()}};
  for (auto _ : state) benchmark::DoNotOptimize(backward(m, in, loss));
}
BENCHMARK(BM_Backward);

}  // namespace

BENCHMARK_MAIN();
