#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <utility>
#include <variant>
#include <vector>

#include "castreg/geometry.hpp"

namespace castreg::synth {

// All primitive dimensions are in millimeters. Each primitive has a local
// frame (rotation, center); "axis" means the local z axis.

struct Hole {
  double u = 0.0;  // center in the plate's local x/y
  double v = 0.0;
  double radius = 1.0;
};

// Rectangular plate (box) with optional through-holes along its local z.
struct Plate {
  Mat3 rotation = Mat3::Identity();
  Vec3 center = Vec3::Zero();
  Vec3 half_extents{1.0, 1.0, 1.0};
  std::vector<Hole> holes;
};

// Cylindrical pipe along its axis. inner_radius == 0 gives a solid rod.
struct Pipe {
  Mat3 rotation = Mat3::Identity();
  Vec3 center = Vec3::Zero();
  double outer_radius = 1.0;
  double inner_radius = 0.0;
  double half_length = 1.0;
};

// Solid cylinder rising from `center` along its axis: side wall + top cap.
struct Boss {
  Mat3 rotation = Mat3::Identity();
  Vec3 center = Vec3::Zero();
  double radius = 1.0;
  double height = 1.0;
};

using Primitive = std::variant<Plate, Pipe, Boss>;

struct ShapeSpec {
  std::uint64_t seed = 0;
  std::vector<Primitive> primitives;

  void validate() const;
  double surface_area() const;
};

enum class PartKind { Bracket, Housing, Manifold, Flange, Cover };
inline constexpr std::array<PartKind, 5> kAllPartKinds{
    PartKind::Bracket, PartKind::Housing, PartKind::Manifold, PartKind::Flange,
    PartKind::Cover};

// Die-cast-like part of the given family with seeded dimension jitter. The
// overall extent lies in [100, 800] mm.
ShapeSpec make_part(PartKind kind, std::uint64_t seed);
// Part family chosen by the seed.
ShapeSpec random_part(std::uint64_t seed);

// Area-weighted uniform samples over the union of primitive surfaces, in
// millimeters, with provenance ids 0..n-1.
PointCloud sample_surface(const ShapeSpec& spec, std::size_t n, std::uint64_t seed);

struct Normalization {
  PointCloud cloud;
  Vec3 centroid;
  double scale;  // original units per normalized unit
};

Normalization normalize_unit_sphere(const PointCloud& cloud);
PointCloud denormalize(const PointCloud& normalized, const Vec3& centroid,
                       double scale, Unit unit = Unit::Millimeters);

// sigma is given in millimeters and converted through cloud.mm_per_unit().
PointCloud add_gaussian_noise(const PointCloud& cloud, double sigma_mm,
                              std::uint64_t seed);

// Removes the points closest to a random seed point (a ball in space) so that
// round(keep_ratio * |cloud|) points survive.
PointCloud crop_overlap(const PointCloud& cloud, double keep_ratio,
                        std::uint64_t seed);

struct ErasePatches {
  std::size_t count = 1;
  double radius = 0.25;  // fraction of the cloud's max distance from centroid
};

struct PairSpec {
  std::uint64_t seed = 0;
  std::size_t n_points = 4096;
  std::array<double, 2> rotation_range_deg{0.0, 60.0};
  std::array<double, 2> translation_range_mm{-150.0, 150.0};
  // When set, the translation has exactly this length in a random direction.
  std::optional<double> translation_norm_mm;
  std::array<double, 2> scale_range{0.95, 1.05};
  double overlap_ratio = 0.85;
  double noise_sigma_mm = 0.0;
  ErasePatches erase;

  void validate() const;
};

struct RegistrationPair {
  PointCloud x;
  PointCloud y;
  RigidTransform truth;  // y ≈ truth * x on shared points
  std::vector<std::pair<std::size_t, std::size_t>> correspondence;  // (x idx, y idx)
  double scale_applied = 1.0;

  double shared_fraction() const;
};

RegistrationPair make_pair(const PointCloud& cloud, const PairSpec& spec);

// Deterministic 64-bit seed mixing (splitmix64 finalizer).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

}  // namespace castreg::synth
