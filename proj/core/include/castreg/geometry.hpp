#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <vector>

#include "castreg/error.hpp"

namespace castreg {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Vec6 = Eigen::Matrix<double, 6, 1>;

enum class Unit { Millimeters, Normalized };

std::string_view to_string(Unit unit) noexcept;
Unit unit_from_string(std::string_view name);

// An ordered set of 3-D points. `provenance` is either empty or holds one
// original sample id per point; two clouds derived from the same sample share
// ids for corresponding points. `mm_per_unit` converts coordinates to
// millimeters (1 for millimeter clouds, the normalization scale otherwise).
class PointCloud {
 public:
  PointCloud(std::vector<Vec3> points, Unit unit,
             std::vector<std::int64_t> provenance = {},
             double mm_per_unit = 1.0);

  std::size_t size() const noexcept { return points_.size(); }
  const std::vector<Vec3>& points() const noexcept { return points_; }
  const Vec3& operator[](std::size_t i) const { return points_[i]; }
  Unit unit() const noexcept { return unit_; }
  bool has_provenance() const noexcept { return !provenance_.empty(); }
  const std::vector<std::int64_t>& provenance() const noexcept {
    return provenance_;
  }
  double mm_per_unit() const noexcept { return mm_per_unit_; }

  Vec3 centroid() const;
  // Length of the axis-aligned bounding box diagonal.
  double bbox_diagonal() const;
  // Subset by index list, keeping provenance.
  PointCloud select(std::span<const std::size_t> indices) const;

 private:
  std::vector<Vec3> points_;
  Unit unit_;
  std::vector<std::int64_t> provenance_;
  double mm_per_unit_;
};

struct Twist {
  Vec3 rho = Vec3::Zero();    // translation part
  Vec3 theta = Vec3::Zero();  // axis-angle rotation, radians

  Vec6 as_vector() const;
  static Twist from_vector(const Vec6& v);
};

// Element of SE(3). The constructor rejects rotations that are not proper
// orthonormal within 1e-9.
class RigidTransform {
 public:
  RigidTransform() = default;
  RigidTransform(const Mat3& rotation, const Vec3& translation);

  static RigidTransform identity() { return {}; }
  static RigidTransform from_matrix(const Mat4& m);
  // Orthonormalizes `rotation` (nearest rotation in Frobenius norm) first.
  static RigidTransform projected(const Mat3& rotation, const Vec3& translation);

  const Mat3& rotation() const noexcept { return rotation_; }
  const Vec3& translation() const noexcept { return translation_; }
  Mat4 matrix() const;

  Vec3 operator*(const Vec3& p) const { return rotation_ * p + translation_; }

  // Row-major r00..r22 followed by t0 t1 t2.
  std::vector<double> to_array() const;
  static RigidTransform from_array(std::span<const double> values);

 private:
  Mat3 rotation_ = Mat3::Identity();
  Vec3 translation_ = Vec3::Zero();
};

Mat3 rot_x(double radians);
Mat3 rot_y(double radians);
Mat3 rot_z(double radians);
Mat3 skew(const Vec3& v);
Mat3 so3_exp(const Vec3& theta);
double rotation_angle(const Mat3& r);

PointCloud apply_transform(const RigidTransform& t, const PointCloud& cloud);
// compose(a, b) applied to p equals a * (b * p).
RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
RigidTransform invert(const RigidTransform& t);

RigidTransform se3_exp(const Twist& v);
// Principal-branch logarithm; throws LogNearBranchCut when the rotation angle
// is within 1e-6 of pi.
Twist se3_log(const RigidTransform& t);

// Weighted least-squares rigid alignment of src onto dst (paired by index).
RigidTransform kabsch(std::span<const Vec3> src, std::span<const Vec3> dst,
                      std::span<const double> weights);
RigidTransform kabsch(const PointCloud& src, const PointCloud& dst,
                      std::span<const double> weights);
RigidTransform kabsch(const PointCloud& src, const PointCloud& dst);

}  // namespace castreg
