#include <benchmark/benchmark.h>

#include "castreg/edcp.hpp"
#include "castreg/fusion.hpp"
#include "castreg/msreg.hpp"
#include "castreg/pipeline.hpp"
#include "castreg/synth.hpp"

using namespace castreg;

namespace {

synth::RegistrationPair pair_of(std::size_t n, double rot_deg) {
  return pipeline::bench_pair(7, n, rot_deg, 100.0, 0.0, 11);
}

void BM_Icp(benchmark::State& state) {
  const auto pr = pair_of(static_cast<std::size_t>(state.range(0)), 10.0);
  for (auto _ : state) benchmark::DoNotOptimize(msreg::icp(pr.x, pr.y, {}));
}
BENCHMARK(BM_Icp)->Arg(1024)->Arg(4096)->Unit(benchmark::kMillisecond);

void BM_Ndt(benchmark::State& state) {
  const auto pr = pair_of(static_cast<std::size_t>(state.range(0)), 10.0);
  const msreg::NdtGrid grid = msreg::build_ndt_grid(pr.y, 0.1);
  for (auto _ : state) benchmark::DoNotOptimize(msreg::ndt(pr.x, grid, {}));
}
BENCHMARK(BM_Ndt)->Arg(1024)->Arg(4096)->Unit(benchmark::kMillisecond);

void BM_MultiscaleIcp(benchmark::State& state) {
  const auto pr = pair_of(4096, 30.0);
  const fusion::MdrConfig cfg;
  for (auto _ : state) {
    benchmark::DoNotOptimize(msreg::multiscale_icp(pr.x, pr.y, cfg.pyramid, cfg.icp, {}));
  }
}
BENCHMARK(BM_MultiscaleIcp)->Unit(benchmark::kMillisecond);

void BM_MultiscaleNdt(benchmark::State& state) {
  const auto pr = pair_of(4096, 30.0);
  const fusion::MdrConfig cfg;
  for (auto _ : state) {
    benchmark::DoNotOptimize(msreg::multiscale_ndt(pr.x, pr.y, cfg.pyramid, cfg.ndt, {}));
  }
}
BENCHMARK(BM_MultiscaleNdt)->Unit(benchmark::kMillisecond);

// Untrained weights; the cost does not depend on their values.
void BM_EdcpRegister(benchmark::State& state) {
  const auto pr = pair_of(static_cast<std::size_t>(state.range(0)), 30.0);
  const edcp::EdcpModel model(edcp::EdcpConfig{}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(edcp::edcp_register(model, pr.x, pr.y));
}
BENCHMARK(BM_EdcpRegister)->Arg(256)->Arg(512)->Unit(benchmark::kMillisecond);

}  // namespace
