#include "castreg/synth.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <unordered_map>

namespace castreg::synth {

namespace {

constexpr double kPi = std::numbers::pi;

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Vec3 random_unit_vector(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (;;) {
    const Vec3 v(n(rng), n(rng), n(rng));
    const double len = v.norm();
    if (len > 1e-12) return v / len;
  }
}

struct RectPatch {
  Vec3 origin;  // corner
  Vec3 e1, e2;  // full edge vectors
  std::vector<std::pair<Vec3, double>> holes;  // (center on face, radius)
};

struct CylinderPatch {
  Mat3 frame;
  Vec3 center;
  double radius;
  double z0, z1;
};

struct AnnulusPatch {
  Mat3 frame;
  Vec3 center;
  double r_in, r_out;
};

using Patch = std::variant<RectPatch, CylinderPatch, AnnulusPatch>;

double area(const RectPatch& p) {
  double a = p.e1.cross(p.e2).norm();
  for (const auto& h : p.holes) a -= kPi * h.second * h.second;
  return a;
}
double area(const CylinderPatch& p) { return 2.0 * kPi * p.radius * (p.z1 - p.z0); }
double area(const AnnulusPatch& p) {
  return kPi * (p.r_out * p.r_out - p.r_in * p.r_in);
}

Vec3 sample(const RectPatch& p, Rng& rng) {
  for (;;) {
    const Vec3 q = p.origin + uniform(rng, 0.0, 1.0) * p.e1 + uniform(rng, 0.0, 1.0) * p.e2;
    bool inside_hole = false;
    for (const auto& [c, r] : p.holes) inside_hole = inside_hole || (q - c).norm() < r;
    if (!inside_hole) return q;
  }
}

Vec3 sample(const CylinderPatch& p, Rng& rng) {
  const double phi = uniform(rng, 0.0, 2.0 * kPi);
  const double z = uniform(rng, p.z0, p.z1);
  return p.center + p.frame * Vec3(p.radius * std::cos(phi), p.radius * std::sin(phi), z);
}

Vec3 sample(const AnnulusPatch& p, Rng& rng) {
  const double phi = uniform(rng, 0.0, 2.0 * kPi);
  const double r = std::sqrt(uniform(rng, p.r_in * p.r_in, p.r_out * p.r_out));
  return p.center + p.frame * Vec3(r * std::cos(phi), r * std::sin(phi), 0.0);
}

void add_patches(const Plate& plate, std::vector<Patch>& out) {
  const Mat3& r = plate.rotation;
  const Vec3& h = plate.half_extents;
  const Vec3 ex = r.col(0), ey = r.col(1), ez = r.col(2);
  const Vec3 c = plate.center;
  // +z / -z faces carry the holes.
  for (double s : {1.0, -1.0}) {
    RectPatch face{c + s * h.z() * ez - h.x() * ex - h.y() * ey, 2.0 * h.x() * ex,
                   2.0 * h.y() * ey, {}};
    for (const auto& hole : plate.holes) {
      face.holes.emplace_back(c + s * h.z() * ez + hole.u * ex + hole.v * ey, hole.radius);
    }
    out.emplace_back(std::move(face));
  }
  for (double s : {1.0, -1.0}) {
    out.emplace_back(RectPatch{c + s * h.x() * ex - h.y() * ey - h.z() * ez,
                               2.0 * h.y() * ey, 2.0 * h.z() * ez, {}});
    out.emplace_back(RectPatch{c + s * h.y() * ey - h.x() * ex - h.z() * ez,
                               2.0 * h.x() * ex, 2.0 * h.z() * ez, {}});
  }
  for (const auto& hole : plate.holes) {
    out.emplace_back(CylinderPatch{r, c + hole.u * ex + hole.v * ey, hole.radius,
                                   -h.z(), h.z()});
  }
}

void add_patches(const Pipe& pipe, std::vector<Patch>& out) {
  const Mat3& r = pipe.rotation;
  out.emplace_back(CylinderPatch{r, pipe.center, pipe.outer_radius,
                                 -pipe.half_length, pipe.half_length});
  if (pipe.inner_radius > 0.0) {
    out.emplace_back(CylinderPatch{r, pipe.center, pipe.inner_radius,
                                   -pipe.half_length, pipe.half_length});
  }
  for (double s : {1.0, -1.0}) {
    out.emplace_back(AnnulusPatch{r, pipe.center + s * pipe.half_length * r.col(2),
                                  pipe.inner_radius, pipe.outer_radius});
  }
}

void add_patches(const Boss& boss, std::vector<Patch>& out) {
  const Mat3& r = boss.rotation;
  out.emplace_back(CylinderPatch{r, boss.center, boss.radius, 0.0, boss.height});
  out.emplace_back(AnnulusPatch{r, boss.center + boss.height * r.col(2), 0.0, boss.radius});
}

std::vector<Patch> patches_of(const ShapeSpec& spec) {
  std::vector<Patch> out;
  for (const auto& prim : spec.primitives) {
    std::visit([&](const auto& p) { add_patches(p, out); }, prim);
  }
  return out;
}

void require(bool ok, const std::string& what) {
  if (!ok) fail(ErrorCode::InvalidArgument, "invalid shape: " + what);
}

void validate_frame(const Mat3& r) {
  require(((r.transpose() * r) - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-9 &&
              std::abs(r.determinant() - 1.0) < 1e-9,
          "primitive rotation not in SO(3)");
}

// ---- part families -------------------------------------------------------

struct Jitter {
  Rng rng;
  double global;
  double operator()(double nominal) {
    return nominal * global * uniform(rng, 0.92, 1.08);
  }
};

Mat3 axis_x_to_z() { return rot_y(kPi / 2.0); }   // local z -> world x
Mat3 axis_y_to_z() { return rot_x(-kPi / 2.0); }  // local z -> world y

ShapeSpec bracket(Jitter& j) {
  ShapeSpec s;
  const double lx = j(160.0), ly = j(100.0), t = j(8.0);
  Plate base{Mat3::Identity(), Vec3::Zero(), {lx, ly, t}, {}};
  base.holes = {{-0.6 * lx, -0.5 * ly, j(14.0)}, {0.55 * lx, -0.45 * ly, j(10.0)},
                {0.1 * lx, 0.35 * ly, j(18.0)}};
  s.primitives.emplace_back(base);
  const double hz = j(90.0);
  // wall normal (local z) along world -y, wall height along world z
  Plate wall{rot_x(kPi / 2.0), Vec3(0.0, ly - t, hz - t), {lx, hz, t}, {}};
  wall.holes = {{-0.4 * lx, 0.3 * hz, j(16.0)}, {0.5 * lx, -0.1 * hz, j(11.0)}};
  s.primitives.emplace_back(wall);
  s.primitives.emplace_back(Boss{Mat3::Identity(), Vec3(-0.2 * lx, -0.2 * ly, t), j(20.0), j(35.0)});
  return s;
}

ShapeSpec housing(Jitter& j) {
  ShapeSpec s;
  const double lx = j(200.0), ly = j(140.0), t = j(7.0), hz = j(60.0);
  Plate base{Mat3::Identity(), Vec3::Zero(), {lx, ly, t}, {}};
  base.holes = {{0.7 * lx, 0.6 * ly, j(12.0)}, {-0.3 * lx, 0.1 * ly, j(22.0)}};
  s.primitives.emplace_back(base);
  // long walls: local z along world y
  Plate front{rot_x(kPi / 2.0), Vec3(0.0, -ly + t, hz + t), {lx, hz, t}, {}};
  front.holes = {{0.45 * lx, 0.1 * hz, j(20.0)}};
  s.primitives.emplace_back(front);
  s.primitives.emplace_back(Plate{rot_x(kPi / 2.0), Vec3(0.0, ly - t, hz + t), {lx, hz, t}, {}});
  // short walls: local z along world x
  Plate side{axis_x_to_z(), Vec3(lx - t, 0.0, hz + t), {hz, ly - 2.0 * t, t}, {}};
  s.primitives.emplace_back(side);
  s.primitives.emplace_back(Plate{axis_x_to_z(), Vec3(-lx + t, 0.0, hz + t), {hz, ly - 2.0 * t, t}, {}});
  s.primitives.emplace_back(Boss{Mat3::Identity(), Vec3(0.5 * lx, -0.5 * ly, t), j(18.0), j(70.0)});
  s.primitives.emplace_back(Boss{Mat3::Identity(), Vec3(-0.6 * lx, 0.55 * ly, t), j(12.0), j(40.0)});
  return s;
}

ShapeSpec manifold(Jitter& j) {
  ShapeSpec s;
  const double lx = j(120.0), ly = j(70.0), hz = j(40.0);
  Plate block{Mat3::Identity(), Vec3::Zero(), {lx, ly, hz}, {}};
  block.holes = {{-0.5 * lx, 0.3 * ly, j(15.0)}, {0.6 * lx, -0.4 * ly, j(9.0)}};
  s.primitives.emplace_back(block);
  s.primitives.emplace_back(Pipe{axis_x_to_z(), Vec3(0.0, 0.0, 0.0), j(28.0), j(20.0), lx + j(70.0)});
  s.primitives.emplace_back(Pipe{axis_y_to_z(), Vec3(0.35 * lx, 0.0, 0.1 * hz), j(18.0), j(12.0), ly + j(50.0)});
  s.primitives.emplace_back(Pipe{Mat3::Identity(), Vec3(-0.1 * lx, -0.2 * ly, hz + j(30.0)), j(22.0), j(15.0), j(30.0)});
  return s;
}

ShapeSpec flange(Jitter& j) {
  ShapeSpec s;
  const double ro = j(55.0), ri = j(40.0), len = j(150.0);
  s.primitives.emplace_back(Pipe{Mat3::Identity(), Vec3(0.0, 0.0, len), ro, ri, len});
  const double half = j(110.0), t = j(10.0);
  Plate plate{Mat3::Identity(), Vec3(0.0, 0.0, -t), {half, 0.8 * half, t}, {}};
  plate.holes = {{0.0, 0.0, ri},
                 {0.75 * half, 0.6 * half, j(10.0)},
                 {-0.75 * half, 0.6 * half, j(10.0)},
                 {0.75 * half, -0.6 * half, j(14.0)}};
  s.primitives.emplace_back(plate);
  s.primitives.emplace_back(Boss{Mat3::Identity(), Vec3(-0.7 * half, -0.55 * half, 0.0), j(16.0), j(45.0)});
  return s;
}

ShapeSpec cover(Jitter& j) {
  ShapeSpec s;
  const double lx = j(250.0), ly = j(170.0), t = j(5.0);
  Plate top{Mat3::Identity(), Vec3::Zero(), {lx, ly, t}, {}};
  top.holes = {{-0.8 * lx, -0.75 * ly, j(9.0)}, {0.8 * lx, -0.75 * ly, j(9.0)},
               {-0.8 * lx, 0.75 * ly, j(9.0)}, {0.25 * lx, 0.2 * ly, j(30.0)}};
  s.primitives.emplace_back(top);
  const double rib_h = j(22.0);
  for (double y : {-0.5, 0.0, 0.55}) {
    s.primitives.emplace_back(Plate{rot_x(kPi / 2.0), Vec3(0.0, y * ly, -t - rib_h),
                                    {0.9 * lx, rib_h, j(4.0)}, {}});
  }
  s.primitives.emplace_back(Boss{Mat3::Identity(), Vec3(-0.4 * lx, 0.3 * ly, t), j(20.0), j(30.0)});
  return s;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void ShapeSpec::validate() const {
  require(!primitives.empty(), "no primitives");
  for (const auto& prim : primitives) {
    if (const auto* p = std::get_if<Plate>(&prim)) {
      validate_frame(p->rotation);
      require((p->half_extents.array() > 0.0).all(), "plate extents must be > 0");
      for (std::size_t a = 0; a < p->holes.size(); ++a) {
        const Hole& h = p->holes[a];
        require(h.radius > 0.0, "hole radius must be > 0");
        require(std::abs(h.u) + h.radius < p->half_extents.x() &&
                    std::abs(h.v) + h.radius < p->half_extents.y(),
                "hole leaves the plate");
        for (std::size_t b = a + 1; b < p->holes.size(); ++b) {
          const Hole& o = p->holes[b];
          require(std::hypot(h.u - o.u, h.v - o.v) > h.radius + o.radius,
                  "holes overlap");
        }
      }
    } else if (const auto* q = std::get_if<Pipe>(&prim)) {
      validate_frame(q->rotation);
      require(q->outer_radius > 0.0 && q->half_length > 0.0, "pipe dims must be > 0");
      require(q->inner_radius >= 0.0 && q->inner_radius < q->outer_radius,
              "pipe inner radius must be in [0, outer)");
    } else if (const auto* b = std::get_if<Boss>(&prim)) {
      validate_frame(b->rotation);
      require(b->radius > 0.0 && b->height > 0.0, "boss dims must be > 0");
    }
  }
}

double ShapeSpec::surface_area() const {
  double total = 0.0;
  for (const auto& p : patches_of(*this)) {
    total += std::visit([](const auto& x) { return area(x); }, p);
  }
  return total;
}

ShapeSpec make_part(PartKind kind, std::uint64_t seed) {
  Jitter j{Rng(mix_seed(seed, 11)), 1.0};
  j.global = uniform(j.rng, 0.8, 1.25);
  ShapeSpec s;
  switch (kind) {
    case PartKind::Bracket: s = bracket(j); break;
    case PartKind::Housing: s = housing(j); break;
    case PartKind::Manifold: s = manifold(j); break;
    case PartKind::Flange: s = flange(j); break;
    case PartKind::Cover: s = cover(j); break;
  }
  s.seed = seed;
  s.validate();
  return s;
}

ShapeSpec random_part(std::uint64_t seed) {
  return make_part(kAllPartKinds[mix_seed(seed, 5) % kAllPartKinds.size()], seed);
}

PointCloud sample_surface(const ShapeSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  if (n == 0) fail(ErrorCode::InvalidArgument, "sample_surface with n = 0");
  const std::vector<Patch> patches = patches_of(spec);
  std::vector<double> cumulative;
  cumulative.reserve(patches.size());
  double total = 0.0;
  for (const auto& p : patches) {
    total += std::max(0.0, std::visit([](const auto& x) { return area(x); }, p));
    cumulative.push_back(total);
  }
  if (!(total > 0.0)) fail(ErrorCode::EmptySurface, "shape has zero surface area");

  Rng rng(mix_seed(seed, 1));
  std::vector<Vec3> pts;
  pts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = uniform(rng, 0.0, total);
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    if (it == cumulative.end()) --it;
    const auto& patch = patches[static_cast<std::size_t>(it - cumulative.begin())];
    pts.push_back(std::visit([&](const auto& x) { return sample(x, rng); }, patch));
  }
  std::vector<std::int64_t> prov(n);
  std::iota(prov.begin(), prov.end(), std::int64_t{0});
  return {std::move(pts), Unit::Millimeters, std::move(prov), 1.0};
}

Normalization normalize_unit_sphere(const PointCloud& cloud) {
  const Vec3 c = cloud.centroid();
  double scale = 0.0;
  for (const auto& p : cloud.points()) scale = std::max(scale, (p - c).norm());
  if (!(scale > 0.0)) scale = 1.0;  // single point or all coincident
  std::vector<Vec3> pts;
  pts.reserve(cloud.size());
  for (const auto& p : cloud.points()) pts.push_back((p - c) / scale);
  PointCloud out(std::move(pts), Unit::Normalized, cloud.provenance(),
                 cloud.mm_per_unit() * scale);
  return {std::move(out), c, scale};
}

PointCloud denormalize(const PointCloud& normalized, const Vec3& centroid,
                       double scale, Unit unit) {
  std::vector<Vec3> pts;
  pts.reserve(normalized.size());
  for (const auto& p : normalized.points()) pts.push_back(p * scale + centroid);
  return {std::move(pts), unit, normalized.provenance(),
          normalized.mm_per_unit() / scale};
}

PointCloud add_gaussian_noise(const PointCloud& cloud, double sigma_mm,
                              std::uint64_t seed) {
  if (!(sigma_mm >= 0.0)) fail(ErrorCode::InvalidArgument, "noise sigma must be >= 0");
  if (sigma_mm == 0.0) return cloud;
  const double sigma = sigma_mm / cloud.mm_per_unit();
  Rng rng(mix_seed(seed, 2));
  std::normal_distribution<double> n(0.0, sigma);
  std::vector<Vec3> pts;
  pts.reserve(cloud.size());
  for (const auto& p : cloud.points()) {
    const double dx = n(rng), dy = n(rng), dz = n(rng);
    pts.push_back(p + Vec3(dx, dy, dz));
  }
  return {std::move(pts), cloud.unit(), cloud.provenance(), cloud.mm_per_unit()};
}

PointCloud crop_overlap(const PointCloud& cloud, double keep_ratio, std::uint64_t seed) {
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) {
    fail(ErrorCode::InvalidArgument, "keep_ratio must be in (0, 1]");
  }
  const std::size_t n = cloud.size();
  const auto keep = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(keep_ratio * static_cast<double>(n))));
  if (keep >= n) return cloud;
  Rng rng(mix_seed(seed, 3));
  const Vec3 center =
      cloud[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)];
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> dist(n);
  for (std::size_t i = 0; i < n; ++i) dist[i] = (cloud[i] - center).squaredNorm();
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dist[a] != dist[b] ? dist[a] > dist[b] : a < b;
  });
  // farthest `keep` points survive; original order is preserved
  std::vector<std::size_t> kept(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
  std::sort(kept.begin(), kept.end());
  return cloud.select(kept);
}

void PairSpec::validate() const {
  auto bad = [](const std::string& what) {
    fail(ErrorCode::InvalidArgument, "invalid pair spec: " + what);
  };
  if (!(overlap_ratio > 0.0 && overlap_ratio <= 1.0)) bad("overlap_ratio must be in (0, 1]");
  if (!(scale_range[0] > 0.0 && scale_range[1] < 2.0 && scale_range[0] <= scale_range[1])) {
    bad("scale_range must lie in (0, 2)");
  }
  if (n_points < 16) bad("n_points must be >= 16");
  if (!(rotation_range_deg[0] >= 0.0 && rotation_range_deg[0] <= rotation_range_deg[1] &&
        rotation_range_deg[1] <= 180.0)) {
    bad("rotation_range_deg must satisfy 0 <= lo <= hi <= 180");
  }
  if (translation_range_mm[0] > translation_range_mm[1]) bad("translation range lo > hi");
  if (translation_norm_mm && *translation_norm_mm < 0.0) bad("translation_norm_mm < 0");
  if (noise_sigma_mm < 0.0) bad("noise_sigma_mm < 0");
  if (erase.radius < 0.0) bad("erase radius < 0");
}

double RegistrationPair::shared_fraction() const {
  return static_cast<double>(correspondence.size()) / static_cast<double>(x.size());
}

namespace {

std::optional<PointCloud> erase_balls(const PointCloud& cloud,
                                      const ErasePatches& erase,
                                      double max_radius, Rng& rng) {
  if (erase.count == 0 || erase.radius <= 0.0) return cloud;
  std::vector<char> removed(cloud.size(), 0);
  const double r = erase.radius * max_radius;
  std::uniform_int_distribution<std::size_t> pick(0, cloud.size() - 1);
  for (std::size_t k = 0; k < erase.count; ++k) {
    const Vec3 center = cloud[pick(rng)];
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      if ((cloud[i] - center).norm() <= r) removed[i] = 1;
    }
  }
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < cloud.size(); ++i)
    if (!removed[i]) kept.push_back(i);
  if (kept.size() < 3) return std::nullopt;
  return cloud.select(kept);
}

}  // namespace

RegistrationPair make_pair(const PointCloud& cloud, const PairSpec& spec) {
  spec.validate();
  Rng rng(mix_seed(spec.seed, 4));

  std::vector<std::int64_t> prov = cloud.provenance();
  if (prov.empty()) {
    prov.resize(cloud.size());
    std::iota(prov.begin(), prov.end(), std::int64_t{0});
  }

  // Scale augmentation is applied to the shared source cloud so that ground
  // truth stays rigid.
  const double s = uniform(rng, spec.scale_range[0], std::nextafter(spec.scale_range[1], 3.0));
  const Vec3 c = cloud.centroid();
  std::vector<Vec3> scaled;
  scaled.reserve(cloud.size());
  double max_radius = 0.0;
  for (const auto& p : cloud.points()) {
    scaled.push_back(c + s * (p - c));
    max_radius = std::max(max_radius, (scaled.back() - c).norm());
  }
  const PointCloud base(std::move(scaled), cloud.unit(), prov, cloud.mm_per_unit());

  // ground truth
  const double lo = spec.rotation_range_deg[0] * kPi / 180.0;
  const double hi = spec.rotation_range_deg[1] * kPi / 180.0;
  const Vec3 axis = random_unit_vector(rng);
  const double angle = hi > lo ? uniform(rng, lo, hi) : lo;
  Vec3 t_mm;
  if (spec.translation_norm_mm) {
    t_mm = *spec.translation_norm_mm * random_unit_vector(rng);
  } else {
    for (int k = 0; k < 3; ++k) {
      t_mm[k] = spec.translation_range_mm[1] > spec.translation_range_mm[0]
                    ? uniform(rng, spec.translation_range_mm[0], spec.translation_range_mm[1])
                    : spec.translation_range_mm[0];
    }
  }
  const RigidTransform truth(so3_exp(angle * axis), t_mm / cloud.mm_per_unit());

  constexpr int kAttempts = 64;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    std::optional<PointCloud> x_opt = erase_balls(base, spec.erase, max_radius, rng);
    std::optional<PointCloud> y_opt = erase_balls(base, spec.erase, max_radius, rng);
    if (!x_opt || !y_opt) continue;
    PointCloud x = std::move(*x_opt);
    const PointCloud& y_src = *y_opt;

    std::unordered_map<std::int64_t, std::size_t> y_index;
    for (std::size_t j = 0; j < y_src.size(); ++j) y_index.emplace(y_src.provenance()[j], j);
    std::vector<std::pair<std::size_t, std::size_t>> corr;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (auto it = y_index.find(x.provenance()[i]); it != y_index.end()) {
        corr.emplace_back(i, it->second);
      }
    }
    const double shared = static_cast<double>(corr.size()) / static_cast<double>(x.size());
    if (shared + 1e-12 < spec.overlap_ratio) continue;

    const std::uint64_t noise_seed = mix_seed(spec.seed, 100 + static_cast<std::uint64_t>(attempt));
    PointCloud y = apply_transform(truth, add_gaussian_noise(y_src, spec.noise_sigma_mm, noise_seed));
    return {std::move(x), std::move(y), truth, std::move(corr), s};
  }
  fail(ErrorCode::OverlapInfeasible,
       "could not reach overlap ratio " + std::to_string(spec.overlap_ratio) +
           " with the configured erase patches");
}

}  // namespace castreg::synth
