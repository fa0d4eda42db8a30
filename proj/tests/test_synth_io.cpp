#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "doctest.h"

#include "castreg/cloud_io.hpp"
#include "castreg/error.hpp"
#include "castreg/metrics.hpp"
#include "castreg/synth.hpp"
#include "test_util.hpp"

using namespace castreg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "castreg_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

synth::ShapeSpec unit_cube() {
  synth::Plate p;
  p.half_extents = Vec3(0.5, 0.5, 0.5);
  return {1, {p}};
}

}  // namespace

TEST_CASE("sample_surface is area weighted on a cube") {
  const std::size_t k = 2000;
  auto c = synth::sample_surface(unit_cube(), 6 * k, 42);
  REQUIRE(c.size() == 6 * k);
  std::array<std::size_t, 6> faces{};
  for (const auto& p : c.points()) {
    int best = 0;
    double m = -1.0;
    for (int a = 0; a < 3; ++a) {
      if (std::abs(p[a]) > m) {
        m = std::abs(p[a]);
        best = 2 * a + (p[a] > 0 ? 1 : 0);
      }
    }
    CHECK(m == doctest::Approx(0.5));
    ++faces[best];
  }
  // Multinomial with p = 1/6: sd = sqrt(n p (1 - p)).
  const double sd = std::sqrt(6.0 * k * (1.0 / 6.0) * (5.0 / 6.0));
  for (auto f : faces) CHECK(std::abs(static_cast<double>(f) - k) < 3 * sd);
}

TEST_CASE("sample_surface is deterministic and sized") {
  auto spec = synth::random_part(7);
  auto a = synth::sample_surface(spec, 4096, 3);
  auto b = synth::sample_surface(spec, 4096, 3);
  REQUIRE(a.size() == 4096);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  CHECK(a.provenance().back() == 4095);
  auto c = synth::sample_surface(spec, 4096, 4);
  CHECK(c[0] != a[0]);
}

TEST_CASE("every part family stays within the extent range") {
  for (auto kind : synth::kAllPartKinds) {
    for (std::uint64_t s = 0; s < 5; ++s) {
      auto spec = synth::make_part(kind, s);
      auto cloud = synth::sample_surface(spec, 2048, s);
      Vec3 lo = cloud[0], hi = cloud[0];
      for (const auto& p : cloud.points()) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
      }
      double extent = (hi - lo).maxCoeff();
      CHECK(extent >= 100.0 * 0.9);
      CHECK(extent <= 800.0);
    }
  }
}

TEST_CASE("normalize_unit_sphere") {
  PointCloud two({Vec3(0, 0, 0), Vec3(2, 0, 0)}, Unit::Millimeters);
  auto n = synth::normalize_unit_sphere(two);
  CHECK((n.cloud[0] - Vec3(-1, 0, 0)).norm() < 1e-15);
  CHECK((n.cloud[1] - Vec3(1, 0, 0)).norm() < 1e-15);
  CHECK(n.scale == doctest::Approx(1.0));
  CHECK(n.cloud.unit() == Unit::Normalized);

  auto again = synth::normalize_unit_sphere(n.cloud);
  CHECK(again.scale == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(again.centroid.norm() < 1e-12);

  auto part = synth::sample_surface(synth::random_part(11), 1000, 1);
  auto np = synth::normalize_unit_sphere(part);
  CHECK(np.cloud.centroid().norm() < 1e-12);
  double r = 0.0;
  for (const auto& p : np.cloud.points()) r = std::max(r, p.norm());
  CHECK(std::abs(r - 1.0) < 1e-12);
  CHECK(np.cloud.mm_per_unit() == doctest::Approx(np.scale));
  auto back = synth::denormalize(np.cloud, np.centroid, np.scale);
  for (std::size_t i = 0; i < part.size(); ++i) CHECK((back[i] - part[i]).norm() < 1e-9);
}

TEST_CASE("make_pair identity case") {
  auto cloud = synth::sample_surface(synth::random_part(5), 512, 2);
  synth::PairSpec spec;
  spec.seed = 9;
  spec.rotation_range_deg = {0, 0};
  spec.translation_range_mm = {0, 0};
  spec.scale_range = {1, 1};
  spec.overlap_ratio = 1.0;
  spec.erase.count = 0;
  auto pair = synth::make_pair(cloud, spec);
  CHECK(test::max_abs(pair.truth.matrix(), Mat4::Identity()) == 0.0);
  REQUIRE(pair.x.size() == pair.y.size());
  for (std::size_t i = 0; i < pair.x.size(); ++i) CHECK((pair.x[i] - pair.y[i]).norm() < 1e-12);
}

TEST_CASE("make_pair ground truth and overlap") {
  auto norm = synth::normalize_unit_sphere(synth::sample_surface(synth::random_part(3), 2048, 1));
  std::vector<std::size_t> first16(16);
  std::iota(first16.begin(), first16.end(), 0);
  const PointCloud small = norm.cloud.select(first16);
  std::vector<double> angles;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    synth::PairSpec spec;
    spec.seed = s;
    spec.erase.count = 0;  // cheap path for the sampling statistics
    spec.overlap_ratio = 1.0;
    auto pair = synth::make_pair(small, spec);
    angles.push_back(rotation_angle(pair.truth.rotation()) * 180.0 / std::numbers::pi);
    Vec3 t_mm = pair.truth.translation() * norm.cloud.mm_per_unit();
    CHECK(t_mm.cwiseAbs().maxCoeff() <= 150.0 + 1e-9);
  }
  std::sort(angles.begin(), angles.end());
  CHECK(angles.back() <= 60.0 + 1e-9);
  // Quantiles of U[0, 60] with a generous sampling margin.
  for (double q : {0.1, 0.25, 0.5, 0.75, 0.9}) {
    double got = angles[static_cast<std::size_t>(q * 999)];
    CHECK(std::abs(got - 60.0 * q) < 4.0);
  }

  for (std::uint64_t s = 0; s < 20; ++s) {
    synth::PairSpec spec;
    spec.seed = 100 + s;
    auto pair = synth::make_pair(norm.cloud, spec);
    CHECK(pair.shared_fraction() >= 0.85);
    std::vector<Vec3> moved, target;
    for (auto [i, j] : pair.correspondence) {
      CHECK(pair.x.provenance()[i] == pair.y.provenance()[j]);
      moved.push_back(pair.truth * pair.x[i]);
      target.push_back(pair.y[j]);
    }
    CHECK(point_rmse(moved, target) < 1e-9);
  }
}

TEST_CASE("make_pair is deterministic and reports infeasible overlap") {
  auto norm = synth::normalize_unit_sphere(synth::sample_surface(synth::random_part(8), 1024, 1));
  synth::PairSpec spec;
  spec.seed = 77;
  spec.noise_sigma_mm = 0.1;
  auto a = synth::make_pair(norm.cloud, spec);
  auto b = synth::make_pair(norm.cloud, spec);
  REQUIRE(a.y.size() == b.y.size());
  for (std::size_t i = 0; i < a.y.size(); ++i) CHECK(a.y[i] == b.y[i]);
  CHECK(a.truth.matrix() == b.truth.matrix());

  spec.erase.count = 4;
  spec.erase.radius = 0.9;
  spec.overlap_ratio = 1.0;
  try {
    synth::make_pair(norm.cloud, spec);
    FAIL("expected OverlapInfeasible");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::OverlapInfeasible);
  }
}

TEST_CASE("add_gaussian_noise") {
  PointCloud c(test::random_points(4096, 1, 50.0), Unit::Millimeters);
  auto same = synth::add_gaussian_noise(c, 0.0, 1);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(same[i] == c[i]);

  auto n1 = synth::add_gaussian_noise(c, 0.1, 5);
  auto n2 = synth::add_gaussian_noise(c, 0.1, 5);
  Vec3 sum = Vec3::Zero(), sq = Vec3::Zero();
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK(n1[i] == n2[i]);
    Vec3 d = n1[i] - c[i];
    sum += d;
    sq += d.cwiseProduct(d);
  }
  const double n = static_cast<double>(c.size());
  for (int a = 0; a < 3; ++a) {
    double mean = sum[a] / n;
    double sd = std::sqrt(sq[a] / n - mean * mean);
    CHECK(std::abs(sd - 0.1) < 0.005);
  }

  // Normalized cloud: sigma is converted through mm_per_unit.
  PointCloud norm(test::random_points(4096, 2, 0.5), Unit::Normalized, {}, 200.0);
  auto nn = synth::add_gaussian_noise(norm, 0.1, 6);
  double s2 = 0.0;
  for (std::size_t i = 0; i < norm.size(); ++i) s2 += (nn[i] - norm[i]).squaredNorm();
  CHECK(std::sqrt(s2 / (3 * n)) == doctest::Approx(0.1 / 200.0).epsilon(0.05));
}

TEST_CASE("crop_overlap") {
  std::vector<std::int64_t> ids(4096);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int64_t>(i);
  PointCloud c(test::random_points(4096, 3), Unit::Normalized, ids);
  auto full = synth::crop_overlap(c, 1.0, 1);
  CHECK(full.size() == c.size());
  auto a = synth::crop_overlap(c, 0.9, 2);
  auto b = synth::crop_overlap(c, 0.9, 2);
  CHECK(std::abs(static_cast<long>(a.size()) - 3686) <= 1);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

  // The removed set is a ball: some removed point is closer to every other
  // removed point than to any kept one.
  std::vector<bool> kept(c.size(), false);
  for (auto id : a.provenance()) kept[static_cast<std::size_t>(id)] = true;
  bool ball = false;
  for (std::size_t ctr = 0; ctr < c.size() && !ball; ++ctr) {
    if (kept[ctr]) continue;
    double max_removed = 0.0, min_kept = 1e9;
    for (std::size_t i = 0; i < c.size(); ++i) {
      double d = (c[i] - c[ctr]).norm();
      if (kept[i]) min_kept = std::min(min_kept, d);
      else max_removed = std::max(max_removed, d);
    }
    ball = max_removed <= min_kept;
  }
  CHECK(ball);
}

TEST_CASE("cloud file round trips") {
  auto dir = scratch("io");
  std::vector<std::int64_t> prov(200);
  for (std::size_t i = 0; i < prov.size(); ++i) prov[i] = static_cast<std::int64_t>(i * 2);
  PointCloud c(test::random_points(200, 4, 400.0), Unit::Millimeters, prov);
  for (const char* name : {"c.ply", "c.xyz"}) {
    io::write_cloud(dir / name, c);
    auto r = io::read_cloud(dir / name);
    REQUIRE(r.size() == c.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i)
      worst = std::max(worst, (r[i] - c[i]).cwiseAbs().maxCoeff());
    CHECK(worst < 1e-6);
  }
  auto ply = io::read_cloud(dir / "c.ply");
  CHECK(ply.provenance() == c.provenance());
  CHECK(ply.unit() == Unit::Millimeters);

  std::ofstream(dir / "empty.ply").close();
  try {
    io::read_cloud(dir / "empty.ply");
    FAIL("expected ParseError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ParseError);
  }
  std::ofstream(dir / "bad.xyz") << "1 2 3\n4 five 6\n";
  try {
    io::read_cloud(dir / "bad.xyz");
    FAIL("expected ParseError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ParseError);
    CHECK(std::string(e.what()).find("bad.xyz:2:") != std::string::npos);
  }
  try {
    io::read_cloud(dir / "missing.ply");
    FAIL("expected MissingFile");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingFile);
  }
}

TEST_CASE("manifest round trip") {
  auto dir = scratch("manifest");
  PointCloud c(test::random_points(20, 5), Unit::Normalized);
  io::write_cloud(dir / "x.ply", c);
  io::write_cloud(dir / "y.ply", c);
  std::mt19937_64 rng(1);
  io::DatasetManifest m;
  for (int i = 0; i < 3; ++i) {
    io::PairRecord r{"x.ply", "y.ply", test::random_transform(rng), Unit::Normalized,
                     static_cast<std::uint64_t>(1000 + i), i == 2 ? "test" : "train", 123.5};
    m.pairs.push_back(r);
  }
  io::write_manifest(dir / "manifest.json", m);
  auto back = io::read_manifest(dir / "manifest.json");
  REQUIRE(back.pairs.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.pairs[i].x_path == m.pairs[i].x_path);
    CHECK(back.pairs[i].seed == m.pairs[i].seed);
    CHECK(back.pairs[i].split == m.pairs[i].split);
    CHECK(back.pairs[i].mm_per_unit == m.pairs[i].mm_per_unit);
    CHECK(back.pairs[i].transform.matrix() == m.pairs[i].transform.matrix());
  }
  CHECK(back.split("test").size() == 1);

  m.pairs[0].y_path = "nope.ply";
  io::write_manifest(dir / "broken.json", m);
  CHECK_THROWS_AS(io::read_manifest(dir / "broken.json"), Error);
}
