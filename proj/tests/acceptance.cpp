// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "castreg/autodiff.hpp"
#include "castreg/edcp.hpp"
#include "castreg/error.hpp"
#include "castreg/fusion.hpp"
#include "castreg/geometry.hpp"
#include "castreg/kdtree.hpp"
#include "castreg/metrics.hpp"
#include "castreg/msreg.hpp"
#include "castreg/pipeline.hpp"
#include "castreg/synth.hpp"
#include "grad_suite.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace castreg;
using pipeline::Method;

namespace {

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... v) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, v...);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

constexpr double kDeg = std::numbers::pi / 180.0;

fs::path g_work;

// ---- shared fixtures ----

// Normalized source cloud and a pair with exactly `rot_deg` rotation and
// `trans` (normalized units) translation.
synth::RegistrationPair offset_pair(std::uint64_t seed, std::size_t n, double rot_deg,
                                    double trans, double noise_mm = 0.0) {
  const PointCloud src = pipeline::source_cloud(seed, n);
  synth::PairSpec ps;
  ps.seed = synth::mix_seed(seed, 77);
  ps.rotation_range_deg = {rot_deg, rot_deg};
  ps.translation_norm_mm = trans * src.mm_per_unit();
  ps.noise_sigma_mm = noise_mm;
  return synth::make_pair(src, ps);
}

double pair_error(const RigidTransform& t, const synth::RegistrationPair& p) {
  return evaluate(t, p.truth, p.x.points()).point_rmse;
}

// Dataset, trained coarse model and fusion model for the pipeline criteria.
struct Trained {
  pipeline::RunConfig cfg;
  io::DatasetManifest manifest;
  pipeline::Models models;
  double untrained_mae = 0.0, trained_mae = 0.0, train_seconds = 0.0;
  std::vector<double> history;
};

std::optional<Trained> g_trained;

double heldout_mae(const Trained& t, const pipeline::Models& models) {
  double s = 0.0;
  const auto test = t.manifest.split("test");
  for (const auto* r : test) {
    const PointCloud x = io::read_cloud(io::resolve(t.cfg.manifest_path(), r->x_path));
    const PointCloud y = io::read_cloud(io::resolve(t.cfg.manifest_path(), r->y_path));
    const auto reg = pipeline::register_pair(Method::Edcp, x, y, models, t.cfg);
    s += evaluate(reg.transform, r->transform, x.points()).mae_r;
  }
  return s / static_cast<double>(test.size());
}

Trained& trained() {
  if (g_trained) return *g_trained;
  Trained t;
  pipeline::RunConfig& cfg = t.cfg;
  cfg.seed = 2024;
  cfg.dataset_dir = g_work / "data";
  cfg.checkpoint_dir = g_work / "checkpoints";
  cfg.output_dir = g_work / "out";
  cfg.gen.pairs = 250;
  cfg.gen.train_fraction = 0.8;
  cfg.gen.spec.n_points = 1024;
  cfg.gen.spec.rotation_range_deg = {0.0, 45.0};
  cfg.edcp.max_points = 256;
  cfg.edcp.train.epochs = 30;
  cfg.edcp.train.lr = 0.05;
  cfg.edcp.train.batch_size = 8;
  fs::create_directories(cfg.output_dir);

  const auto t0 = Clock::now();
  t.manifest = pipeline::cmd_gen_data(cfg);
  {
    // cmd_train_edcp's starting point.
    pipeline::Models untrained;
    untrained.edcp = edcp::EdcpModel(cfg.edcp.model, synth::mix_seed(cfg.seed, 0xed01));
    t.untrained_mae = heldout_mae(t, untrained);
  }
  t.history = pipeline::cmd_train_edcp(cfg).history;
  t.train_seconds = since(t0);
  pipeline::cmd_train_fusion(cfg);
  const std::vector<Method> all(pipeline::kAllMethods.begin(), pipeline::kAllMethods.end());
  t.models = pipeline::load_models(cfg, all);
  t.trained_mae = heldout_mae(t, t.models);
  g_trained = std::move(t);
  return *g_trained;
}

// ---- criteria ----

Outcome procrustes() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto src = test::random_points(64 + i, 100 + i);
    const RigidTransform truth = test::random_transform(rng, 3.0, 1.0);
    std::vector<Vec3> dst;
    for (const auto& p : src) dst.push_back(truth * p);
    const std::vector<double> w(src.size(), 1.0);
    const RigidTransform est = kabsch(src, dst, w);
    worst = std::max({worst, rotation_error_rad(est.rotation(), truth.rotation()),
                      (est.translation() - truth.translation()).norm()});
  }
  const double s = since(t0);
  return {worst < 1e-9 && s < 5.0, fmt("max error %.2e, %.3f s", worst, s)};
}

Outcome gradients() {
  double worst = 0.0;
  std::string worst_name;
  auto run = [&](const std::string& name, auto&& fn) {
    std::mt19937_64 rng(std::hash<std::string>{}(name) ^ 0xacce);
    for (int i = 0; i < 10; ++i) {
      const double e = fn(rng);
      if (!(e <= worst)) {
        worst = e;
        worst_name = name;
      }
    }
  };
  std::size_t count = 0;
  for (const auto& c : test::primitive_checks()) {
    run(c.name, c.run);
    ++count;
  }
  run("cross_block", test::cross_block_check);
  run("fusion_mlp", test::fusion_mlp_check);
  return {worst < 1e-4, fmt("%zu primitives + block + mlp, worst %.2e (%s)", count, worst,
                            worst_name.c_str())};
}

Outcome attention_scaling() {
  const std::vector<std::size_t> sizes{1024, 2048, 4096};
  const auto eff =
      edcp::complexity_probe(sizes, 64, edcp::AttentionVariant::Efficient, 5, 3);
  const auto dot =
      edcp::complexity_probe(sizes, 64, edcp::AttentionVariant::DotProduct, 5, 3);
  bool ok = true;
  std::string d;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    const double re = eff[i + 1].seconds / eff[i].seconds;
    const double rd = dot[i + 1].seconds / dot[i].seconds;
    ok = ok && re >= 1.6 && re <= 2.6 && rd >= 3.2;
    d += fmt("n %zu->%zu efficient x%.2f dot x%.2f; ", sizes[i], sizes[i + 1], re, rd);
  }

  // No n x n buffer in the efficient forward or backward pass.
  const std::size_t n = 4096, dim = 64;
  std::mt19937_64 rng(4);
  auto q = test::random_tensor({n, dim}, rng), k = test::random_tensor({n, dim}, rng),
       v = test::random_tensor({n, dim}, rng);
  std::size_t largest = 0, dot_largest = 0;
  {
    ad::AllocationProbe probe;
    edcp::efficient_attention(q, k, v);
    largest = probe.largest();
  }
  {
    ad::Tape tape;
    auto qv = tape.variable(q), kv = tape.variable(k), vv = tape.variable(v);
    ad::AllocationProbe probe;
    tape.backward(ad::sum(edcp::efficient_attention(qv, kv, vv)));
    largest = std::max(largest, probe.largest());
  }
  {
    ad::AllocationProbe probe;
    edcp::dot_product_attention(q, k, v);
    dot_largest = probe.largest();
  }
  ok = ok && largest < n * n && dot_largest >= n * n;
  d += fmt("largest buffer %zu (n^2 = %zu; dot %zu)", largest, n * n, dot_largest);
  return {ok, d};
}

Outcome toy_training() {
  const Trained& t = trained();
  const bool ok = t.trained_mae < 5.0 && t.trained_mae < 0.5 * t.untrained_mae &&
                  t.train_seconds < 20 * 60.0;
  return {ok, fmt("held-out MAE(R) %.3f deg vs untrained %.3f deg; loss %.3f -> %.3f; %.0f s",
                  t.trained_mae, t.untrained_mae, t.history.front(), t.history.back(),
                  t.train_seconds)};
}

Outcome icp_local() {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int ok = 0;
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    // Default-size clouds; the truth offset is drawn below.
    const auto pr = offset_pair(500 + i, synth::PairSpec{}.n_points, 0.0, 0.0);
    const Vec3 axis = test::random_unit(rng);
    const Vec3 dir = test::random_unit(rng);
    const RigidTransform delta(so3_exp(axis * (u(rng) * 10.0 * kDeg)), dir * (u(rng) * 0.05));
    const RigidTransform init = compose(delta, pr.truth);
    double e = 1.0;
    try {
      e = pair_error(msreg::icp(pr.x, pr.y, init).transform, pr);
    } catch (const Error&) {
    }
    ok += e < 1e-3;
    worst = std::max(worst, e);
  }
  return {ok >= 95, fmt("%d/100 below 1e-3 (worst %.2e)", ok, worst)};
}

struct Rates {
  int a = 0, b = 0;
};

// Success counts (point_rmse < 1e-2) of two registration routes from identity.
template <class A, class B>
Rates compare_routes(double rot_deg, double trans_diag, A&& route_a, B&& route_b) {
  Rates r;
  for (int i = 0; i < 50; ++i) {
    const PointCloud src = pipeline::source_cloud(1000 + i, 1024);
    const double trans = trans_diag * src.bbox_diagonal();
    const auto pr = offset_pair(1000 + i, 1024, rot_deg, trans);
    auto success = [&](auto&& route) {
      try {
        return pair_error(route(pr), pr) < 1e-2;
      } catch (const Error&) {
        return false;
      }
    };
    r.a += success(route_a);
    r.b += success(route_b);
  }
  return r;
}

Outcome multiscale_benefit() {
  const fusion::MdrConfig cfg;
  msreg::PyramidConfig single = cfg.pyramid;
  single.levels = 1;
  const Rates r = compare_routes(
      30.0, 0.0,
      [&](const auto& p) {
        return msreg::multiscale_icp(p.x, p.y, cfg.pyramid, cfg.icp, {}).transform;
      },
      [&](const auto& p) { return msreg::multiscale_icp(p.x, p.y, single, cfg.icp, {}).transform; });
  return {r.a >= r.b, fmt("ms-icp %d/50 vs icp %d/50 at 30 deg", r.a, r.b)};
}

Outcome ndt_translation() {
  const fusion::MdrConfig cfg;
  const Rates r = compare_routes(
      0.0, 0.5,
      [&](const auto& p) {
        return msreg::multiscale_ndt(p.x, p.y, cfg.pyramid, cfg.ndt, {}).transform;
      },
      [&](const auto& p) {
        return msreg::multiscale_icp(p.x, p.y, cfg.pyramid, cfg.icp, {}).transform;
      });
  return {r.a >= r.b, fmt("ms-ndt %d/50 vs ms-icp %d/50 at 0.5 x diagonal", r.a, r.b)};
}

// Fine-stage suite: up to 20 deg and 5% of the unit radius from identity.
synth::RegistrationPair mdr_pair(std::uint64_t seed, double noise_mm) {
  const PointCloud src = pipeline::source_cloud(seed, 1024);
  synth::PairSpec ps;
  ps.seed = synth::mix_seed(seed, 7);
  ps.rotation_range_deg = {0.0, 20.0};
  ps.translation_range_mm = {-0.05 * src.mm_per_unit(), 0.05 * src.mm_per_unit()};
  ps.noise_sigma_mm = noise_mm;
  return synth::make_pair(src, ps);
}

struct Dominance {
  int ok = 0;
  double fused = 0.0, best = 0.0;
};

Dominance mdr_dominance(double noise_mm) {
  const fusion::MdrConfig cfg;
  std::vector<fusion::FusionSample> samples;
  for (int i = 0; i < 300; ++i) {
    const auto pr = mdr_pair(20000 + i, noise_mm);
    const auto ch = fusion::run_channels(pr.x, pr.y, {}, cfg);
    samples.push_back({ch.icp.transform, ch.ndt.transform, ch.rmse1, ch.rmse2, pr.truth,
                       fusion::strided_subsample(pr.x, 1024), std::to_string(i)});
  }
  fusion::FusionMlp mlp({32, 64, 32}, 5);
  const auto [shift, scale] = fusion::feature_statistics(samples);
  mlp.set_input_normalization(shift, scale);
  fusion::FusionTrainConfig tc;
  tc.seed = 9;
  fusion::train_fusion(mlp, samples, tc);

  Dominance d;
  for (int i = 0; i < 50; ++i) {
    const auto pr = mdr_pair(60000 + i, noise_mm);
    const auto r = fusion::mdr_register(pr.x, pr.y, {}, mlp, cfg);
    const double f = pair_error(r.transform, pr);
    const double best = std::min(pair_error(r.t1, pr), pair_error(r.t2, pr));
    d.ok += f <= 1.05 * best;
    d.fused += f / 50.0;
    d.best += best / 50.0;
  }
  return d;
}

Outcome mdr_dominance_check() {
  const Dominance noisy = mdr_dominance(0.1);
  const Dominance clean = mdr_dominance(0.0);
  return {noisy.ok >= 40 && noisy.fused <= noisy.best,
          fmt("sigma 0.1 mm: %d/50 within 1.05x, mean fused %.3e vs best channel %.3e "
              "(noise-free, not gated: %d/50, %.3e vs %.3e)",
              noisy.ok, noisy.fused, noisy.best, clean.ok, clean.fused, clean.best)};
}

struct SuiteErrors {
  std::vector<double> edcp, medpnet, medpnet_noisy;
};

std::optional<SuiteErrors> g_suite;

const SuiteErrors& suite_errors() {
  if (g_suite) return *g_suite;
  const Trained& t = trained();
  SuiteErrors s;
  for (const auto* r : t.manifest.split("test")) {
    const PointCloud x = io::read_cloud(io::resolve(t.cfg.manifest_path(), r->x_path));
    const PointCloud y = io::read_cloud(io::resolve(t.cfg.manifest_path(), r->y_path));
    // Isotropic noise commutes with the rigid motion, so it can go on Y directly.
    const PointCloud y_noisy = synth::add_gaussian_noise(y, 0.1, synth::mix_seed(r->seed, 0x9015));
    auto err = [&](Method m, const PointCloud& target) {
      const auto reg = pipeline::register_pair(m, x, target, t.models, t.cfg);
      return evaluate(reg.transform, r->transform, x.points()).point_rmse;
    };
    s.edcp.push_back(err(Method::Edcp, y));
    s.medpnet.push_back(err(Method::Medpnet, y));
    s.medpnet_noisy.push_back(err(Method::Medpnet, y_noisy));
  }
  g_suite = std::move(s);
  return *g_suite;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

Outcome noise_robustness() {
  const SuiteErrors& s = suite_errors();
  const double clean = mean(s.medpnet), noisy = mean(s.medpnet_noisy);
  return {noisy / clean < 2.0,
          fmt("%zu pairs: mean point_rmse %.3e clean, %.3e noisy, factor %.3f "
              "(medians %.2e, %.2e)",
              s.medpnet.size(), clean, noisy, noisy / clean, median(s.medpnet),
              median(s.medpnet_noisy))};
}

Outcome refinement() {
  const SuiteErrors& s = suite_errors();
  std::size_t ok = 0;
  for (std::size_t i = 0; i < s.edcp.size(); ++i) ok += s.medpnet[i] <= s.edcp[i];
  const double rate = static_cast<double>(ok) / static_cast<double>(s.edcp.size());
  return {rate >= 0.9, fmt("medpnet <= edcp on %zu/%zu pairs (mean %.3e vs %.3e)", ok,
                           s.edcp.size(), mean(s.medpnet), mean(s.edcp))};
}

Outcome time_budget() {
  Trained& t = trained();
  pipeline::RunConfig cfg = t.cfg;
  cfg.budget_s = 60.0;
  const std::uint64_t seed = t.manifest.split("test").front()->seed;
  const auto pr = pipeline::bench_pair(seed, 4096, 30.0, 500.0, 0.0, 31);
  try {
    const auto reg = pipeline::register_pair(Method::Medpnet, pr.x, pr.y, t.models, cfg);
    return {reg.seconds < 60.0, fmt("%zu/%zu points, %.2f s, point_rmse %.2e", pr.x.size(),
                                    pr.y.size(), reg.seconds, pair_error(reg.transform, pr))};
  } catch (const Error& e) {
    return {false, e.what()};
  }
}

Outcome formulas() {
  std::vector<std::string> bad;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) bad.push_back(what);
  };
  expect(ad::huber(0.0, 1.0) == 0.0, "huber(0)");
  expect(ad::huber(0.5, 1.0) == 0.125, "huber(0.5)");
  expect(ad::huber(2.0, 1.0) == 1.5, "huber(2)");
  const std::vector<Vec3> a{Vec3::Zero(), Vec3::Zero()}, b{Vec3(3, 0, 0), Vec3(0, 4, 0)};
  expect(std::abs(point_rmse(a, b) - std::sqrt(12.5)) < 1e-15, "rmse sqrt(12.5)");

  std::mt19937_64 rng(12);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const RigidTransform t = test::random_transform(rng, 3.0, 2.0);
    const RigidTransform back = se3_exp(se3_log(t));
    worst = std::max(worst, test::max_abs(back.matrix(), t.matrix()));
    std::array<double, 6> v;
    for (auto& c : v) c = std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
    const Twist tw = Twist::from_vector(Vec6(v.data()));
    worst = std::max(worst, (se3_log(se3_exp(tw)).as_vector() - tw.as_vector()).norm());
  }
  expect(worst < 1e-9, fmt("se3 round trip %.2e", worst));

  // epsilon filter from perturbed starts, capped and uncapped scores.
  std::size_t increases = 0, runs = 0;
  for (int i = 0; i < 10; ++i) {
    const auto pr = offset_pair(3000 + i, 1024, 0.0, 0.0, i % 2 ? 0.1 : 0.0);
    const KdTree tree(pr.y.points());
    const auto x_sub = fusion::strided_subsample(pr.x, 512);
    for (double factor : {0.0, 0.5}) {
      fusion::EpsilonFilterConfig cfg;
      cfg.truncation_factor = factor;
      const Twist start = se3_log(compose(test::random_transform(rng, 0.1, 0.05), pr.truth));
      const auto r = fusion::epsilon_filter(x_sub, tree, start, cfg);
      ++runs;
      bool up = r.rmse > r.initial_rmse;
      for (std::size_t k = 1; k < r.trace.size(); ++k) up = up || r.trace[k] > r.trace[k - 1];
      increases += up;
    }
  }
  expect(increases == 0, fmt("epsilon filter increased rmse in %zu runs", increases));
  std::string d = fmt("huber, rmse, se3 (worst %.1e), epsilon filter (%zu runs)", worst, runs);
  for (const auto& s : bad) d += "; FAILED " + s;
  return {bad.empty(), d};
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// CSV text without the `seconds` column.
std::string drop_seconds(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  std::optional<std::size_t> col;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    if (!col) {
      const auto it = std::find(cells.begin(), cells.end(), "seconds");
      col = static_cast<std::size_t>(it - cells.begin());
    }
    for (std::size_t i = 0; i < cells.size(); ++i)
      if (i != *col) out += cells[i] + ",";
    out += "\n";
  }
  return out;
}

Outcome determinism() {
  Trained& t = trained();
  pipeline::RunConfig cfg = t.cfg;
  cfg.bench.pairs_per_cell = 1;
  cfg.bench.n_points = 1024;
  std::vector<fs::path> dirs{g_work / "bench_a", g_work / "bench_b"};
  for (const auto& d : dirs) {
    cfg.output_dir = d;
    pipeline::cmd_bench(cfg);
  }
  std::vector<std::string> differ;
  std::size_t rows = 0;
  for (const char* f : {"bench.csv", "bench_cells.csv", "bench_summary.json"}) {
    std::string a = read_file(dirs[0] / f), b = read_file(dirs[1] / f);
    if (std::string(f).ends_with(".csv")) {
      a = drop_seconds(a);
      b = drop_seconds(b);
    }
    if (std::string(f) == "bench.csv") rows = std::count(a.begin(), a.end(), '\n') - 1;
    if (a.empty() || a != b) differ.push_back(f);
  }
  std::string d = fmt("%zu rows", rows);
  for (const auto& f : differ) d += "; differs: " + f;
  return {differ.empty(), d};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"castreg acceptance suite"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "castreg_acceptance").string();
  app.add_option("--only", only, "criterion numbers to run")->delimiter(',');
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);
  g_work = work;
  fs::remove_all(g_work);
  fs::create_directories(g_work);

  const std::vector<Criterion> criteria{
      {1, "procrustes exactness", procrustes},
      {2, "gradient correctness", gradients},
      {3, "linear attention scaling", attention_scaling},
      {4, "toy coarse-model training", toy_training},
      {5, "icp local convergence", icp_local},
      {6, "multiscale benefit", multiscale_benefit},
      {7, "ndt translation robustness", ndt_translation},
      {8, "mdr dominance", mdr_dominance_check},
      {9, "noise robustness", noise_robustness},
      {10, "pipeline refinement", refinement},
      {11, "time budget", time_budget},
      {12, "formula checks", formulas},
      {13, "determinism", determinism},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s AC%-2d %-28s %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), since(t0));
    std::fflush(stdout);
  }
  return failed;
}
