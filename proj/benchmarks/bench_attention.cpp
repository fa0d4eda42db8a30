#include <benchmark/benchmark.h>

#include <random>

#include "castreg/autodiff.hpp"
#include "castreg/edcp.hpp"
#include "castreg/tensor.hpp"

using namespace castreg;

namespace {

ad::Tensor random_tensor(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  ad::Tensor t({n, d});
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

template <bool Efficient>
void BM_AttentionForward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(1);
  const auto q = random_tensor(n, 64, rng), k = random_tensor(n, 64, rng),
             v = random_tensor(n, 64, rng);
  for (auto _ : state) {
    if constexpr (Efficient) {
      benchmark::DoNotOptimize(edcp::efficient_attention(q, k, v));
    } else {
      benchmark::DoNotOptimize(edcp::dot_product_attention(q, k, v));
    }
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_AttentionForward<true>)
    ->Name("BM_EfficientAttention")
    ->RangeMultiplier(2)
    ->Range(512, 4096)
    ->Complexity()
    ->Unit(benchmark::kMillisecond);
BENCHMARK(BM_AttentionForward<false>)
    ->Name("BM_DotProductAttention")
    ->RangeMultiplier(2)
    ->Range(512, 4096)
    ->Complexity()
    ->Unit(benchmark::kMillisecond);

void BM_EfficientAttentionBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(2);
  const auto q = random_tensor(n, 64, rng), k = random_tensor(n, 64, rng),
             v = random_tensor(n, 64, rng);
  for (auto _ : state) {
    ad::Tape tape;
    auto qv = tape.variable(q), kv = tape.variable(k), vv = tape.variable(v);
    tape.backward(ad::sum(edcp::efficient_attention(qv, kv, vv)));
  }
}
BENCHMARK(BM_EfficientAttentionBackward)->Arg(1024)->Arg(4096)->Unit(benchmark::kMillisecond);

}  // namespace
