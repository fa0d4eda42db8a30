#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "castreg/geometry.hpp"
#include "castreg/kdtree.hpp"

using namespace castreg;

namespace {

std::vector<Vec3> cube_points(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = Vec3(u(rng), u(rng), u(rng));
  return pts;
}

void BM_KdTreeBuild(benchmark::State& state) {
  const auto pts = cube_points(static_cast<std::size_t>(state.range(0)), 1);
  for (auto _ : state) {
    KdTree tree(pts);
    benchmark::DoNotOptimize(tree);
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_KdTreeBuild)->RangeMultiplier(4)->Range(1024, 65536)->Complexity();

void BM_KdTreeNearest(benchmark::State& state) {
  const auto pts = cube_points(static_cast<std::size_t>(state.range(0)), 2);
  const auto queries = cube_points(1024, 3);
  const KdTree tree(pts);
  for (auto _ : state) {
    for (const auto& q : queries) benchmark::DoNotOptimize(tree.nearest(q));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(queries.size()));
}
BENCHMARK(BM_KdTreeNearest)->RangeMultiplier(4)->Range(1024, 65536);

void BM_KdTreeKnn16(benchmark::State& state) {
  const auto pts = cube_points(static_cast<std::size_t>(state.range(0)), 4);
  const KdTree tree(pts);
  for (auto _ : state) {
    for (std::size_t i = 0; i < 256; ++i) benchmark::DoNotOptimize(k_nearest(tree, pts[i], 16));
  }
  state.SetItemsProcessed(state.iterations() * 256);
}
BENCHMARK(BM_KdTreeKnn16)->Arg(4096)->Arg(16384);

void BM_Kabsch(benchmark::State& state) {
  const auto src = cube_points(static_cast<std::size_t>(state.range(0)), 5);
  const RigidTransform t(so3_exp(Vec3(0.3, -0.2, 0.5)), Vec3(0.1, 0.2, -0.3));
  std::vector<Vec3> dst;
  for (const auto& p : src) dst.push_back(t * p);
  const std::vector<double> w(src.size(), 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(kabsch(src, dst, w));
}
BENCHMARK(BM_Kabsch)->Arg(256)->Arg(4096);

}  // namespace
