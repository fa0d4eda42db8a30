#include "castreg/geometry.hpp"

#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <cmath>
#include <numbers>
#include <string>

namespace castreg {

namespace {

constexpr double kOrthoTol = 1e-9;

bool is_rotation(const Mat3& r) {
  if (!r.allFinite()) return false;
  const Mat3 gram = r.transpose() * r - Mat3::Identity();
  return gram.cwiseAbs().maxCoeff() <= kOrthoTol &&
         std::abs(r.determinant() - 1.0) <= kOrthoTol;
}

Vec3 vee(const Mat3& w) { return {w(2, 1), w(0, 2), w(1, 0)}; }

}  // namespace

std::string_view to_string(Unit unit) noexcept {
  return unit == Unit::Millimeters ? "millimeters" : "normalized";
}

Unit unit_from_string(std::string_view name) {
  if (name == "millimeters" || name == "mm") return Unit::Millimeters;
  if (name == "normalized") return Unit::Normalized;
  fail(ErrorCode::InvalidArgument, "unknown unit '" + std::string(name) + "'");
}

PointCloud::PointCloud(std::vector<Vec3> points, Unit unit,
                       std::vector<std::int64_t> provenance,
                       double mm_per_unit)
    : points_(std::move(points)),
      unit_(unit),
      provenance_(std::move(provenance)),
      mm_per_unit_(mm_per_unit) {
  if (points_.empty()) fail(ErrorCode::InvalidArgument, "point cloud is empty");
  if (!provenance_.empty() && provenance_.size() != points_.size()) {
    fail(ErrorCode::SizeMismatch,
         "provenance has " + std::to_string(provenance_.size()) +
             " entries for " + std::to_string(points_.size()) + " points");
  }
  if (!(mm_per_unit_ > 0.0) || !std::isfinite(mm_per_unit_)) {
    fail(ErrorCode::InvalidArgument, "mm_per_unit must be positive");
  }
  for (const auto& p : points_) {
    if (!p.allFinite()) fail(ErrorCode::InvalidArgument, "non-finite point");
  }
}

Vec3 PointCloud::centroid() const {
  Vec3 c = Vec3::Zero();
  for (const auto& p : points_) c += p;
  return c / static_cast<double>(points_.size());
}

double PointCloud::bbox_diagonal() const {
  Vec3 lo = points_.front();
  Vec3 hi = points_.front();
  for (const auto& p : points_) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  return (hi - lo).norm();
}

PointCloud PointCloud::select(std::span<const std::size_t> indices) const {
  std::vector<Vec3> pts;
  std::vector<std::int64_t> prov;
  pts.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= points_.size()) {
      fail(ErrorCode::IndexOutOfRange, "select index " + std::to_string(i));
    }
    pts.push_back(points_[i]);
    if (has_provenance()) prov.push_back(provenance_[i]);
  }
  return {std::move(pts), unit_, std::move(prov), mm_per_unit_};
}

Vec6 Twist::as_vector() const {
  Vec6 v;
  v << rho, theta;
  return v;
}

Twist Twist::from_vector(const Vec6& v) {
  return {v.head<3>(), v.tail<3>()};
}

RigidTransform::RigidTransform(const Mat3& rotation, const Vec3& translation)
    : rotation_(rotation), translation_(translation) {
  if (!is_rotation(rotation_)) {
    fail(ErrorCode::InvalidTransform, "rotation is not in SO(3)");
  }
  if (!translation_.allFinite()) {
    fail(ErrorCode::InvalidTransform, "translation is not finite");
  }
}

RigidTransform RigidTransform::from_matrix(const Mat4& m) {
  return {m.topLeftCorner<3, 3>(), m.topRightCorner<3, 1>()};
}

RigidTransform RigidTransform::projected(const Mat3& rotation,
                                         const Vec3& translation) {
  Eigen::JacobiSVD<Mat3> svd(rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) {
    d(2, 2) = -1.0;
  }
  return {svd.matrixU() * d * svd.matrixV().transpose(), translation};
}

Mat4 RigidTransform::matrix() const {
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = rotation_;
  m.topRightCorner<3, 1>() = translation_;
  return m;
}

std::vector<double> RigidTransform::to_array() const {
  std::vector<double> out;
  out.reserve(12);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out.push_back(rotation_(r, c));
  for (int i = 0; i < 3; ++i) out.push_back(translation_(i));
  return out;
}

RigidTransform RigidTransform::from_array(std::span<const double> values) {
  if (values.size() != 12) {
    fail(ErrorCode::SizeMismatch, "transform array needs 12 values, got " +
                                      std::to_string(values.size()));
  }
  Mat3 r;
  for (int i = 0; i < 9; ++i) r(i / 3, i % 3) = values[i];
  return {r, Vec3(values[9], values[10], values[11])};
}

Mat3 rot_x(double a) {
  return Eigen::AngleAxisd(a, Vec3::UnitX()).toRotationMatrix();
}
Mat3 rot_y(double a) {
  return Eigen::AngleAxisd(a, Vec3::UnitY()).toRotationMatrix();
}
Mat3 rot_z(double a) {
  return Eigen::AngleAxisd(a, Vec3::UnitZ()).toRotationMatrix();
}

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return m;
}

namespace {

// Coefficients of the Rodrigues-type series:
//   a = sin(x)/x, b = (1 - cos x)/x^2, c = (x - sin x)/x^3.
struct ExpCoeffs {
  double a, b, c;
};

ExpCoeffs exp_coeffs(double x) {
  const double x2 = x * x;
  if (x < 1e-4) {
    return {1.0 - x2 / 6.0 + x2 * x2 / 120.0,
            0.5 - x2 / 24.0 + x2 * x2 / 720.0,
            1.0 / 6.0 - x2 / 120.0 + x2 * x2 / 5040.0};
  }
  const double s = std::sin(x);
  const double half = std::sin(0.5 * x);
  return {s / x, 2.0 * half * half / x2, (x - s) / (x2 * x)};
}

}  // namespace

Mat3 so3_exp(const Vec3& theta) {
  const double angle = theta.norm();
  const Mat3 w = skew(theta);
  const ExpCoeffs k = exp_coeffs(angle);
  return Mat3::Identity() + k.a * w + k.b * w * w;
}

double rotation_angle(const Mat3& r) {
  const double s = 0.5 * vee(r - r.transpose()).norm();
  const double c = 0.5 * (r.trace() - 1.0);
  return std::atan2(s, c);
}

PointCloud apply_transform(const RigidTransform& t, const PointCloud& cloud) {
  std::vector<Vec3> out;
  out.reserve(cloud.size());
  for (const auto& p : cloud.points()) out.push_back(t * p);
  return {std::move(out), cloud.unit(), cloud.provenance(), cloud.mm_per_unit()};
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  return RigidTransform::projected(
      a.rotation() * b.rotation(), a.rotation() * b.translation() + a.translation());
}

RigidTransform invert(const RigidTransform& t) {
  const Mat3 rt = t.rotation().transpose();
  return {rt, -(rt * t.translation())};
}

RigidTransform se3_exp(const Twist& v) {
  const double angle = v.theta.norm();
  const Mat3 w = skew(v.theta);
  const Mat3 w2 = w * w;
  const ExpCoeffs k = exp_coeffs(angle);
  const Mat3 r = Mat3::Identity() + k.a * w + k.b * w2;
  const Mat3 jac = Mat3::Identity() + k.b * w + k.c * w2;
  return RigidTransform::projected(r, jac * v.rho);
}

Twist se3_log(const RigidTransform& t) {
  const Mat3& r = t.rotation();
  const Vec3 axis_sin = 0.5 * vee(r - r.transpose());
  const double s = axis_sin.norm();
  const double c = 0.5 * (r.trace() - 1.0);
  const double angle = std::atan2(s, c);
  if (angle >= std::numbers::pi - 1e-6) {
    fail(ErrorCode::LogNearBranchCut,
         "rotation angle " + std::to_string(angle) + " rad is at the branch cut");
  }
  const double a2 = angle * angle;
  // theta = angle / sin(angle) * axis_sin
  const double ratio =
      angle < 1e-4 ? 1.0 + a2 / 6.0 + 7.0 * a2 * a2 / 360.0 : angle / s;
  const Vec3 theta = ratio * axis_sin;
  const Mat3 w = skew(theta);
  double d;
  if (angle < 1e-4) {
    d = 1.0 / 12.0 + a2 / 720.0 + a2 * a2 / 30240.0;
  } else {
    const ExpCoeffs k = exp_coeffs(angle);
    d = (1.0 - k.a / (2.0 * k.b)) / a2;
  }
  const Mat3 jac_inv = Mat3::Identity() - 0.5 * w + d * w * w;
  return {jac_inv * t.translation(), theta};
}

RigidTransform kabsch(std::span<const Vec3> src, std::span<const Vec3> dst,
                      std::span<const double> weights) {
  if (src.size() != dst.size() || src.size() != weights.size()) {
    fail(ErrorCode::SizeMismatch,
         "kabsch sizes differ: src " + std::to_string(src.size()) + ", dst " +
             std::to_string(dst.size()) + ", weights " +
             std::to_string(weights.size()));
  }
  if (src.size() < 3) {
    fail(ErrorCode::DegenerateConfiguration,
         "kabsch needs at least 3 pairs, got " + std::to_string(src.size()));
  }
  double total = 0.0;
  Vec3 cs = Vec3::Zero();
  Vec3 cd = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (!(weights[i] >= 0.0)) {
      fail(ErrorCode::InvalidArgument, "kabsch weights must be nonnegative");
    }
    total += weights[i];
    cs += weights[i] * src[i];
    cd += weights[i] * dst[i];
  }
  if (!(total > 0.0)) {
    fail(ErrorCode::InvalidArgument, "kabsch weights sum to zero");
  }
  cs /= total;
  cd /= total;

  Mat3 cov = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    cov += (weights[i] / total) * (src[i] - cs) * (dst[i] - cd).transpose();
  }
  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  if (!(sv(0) > 0.0) || sv(1) <= 1e-12 * sv(0)) {
    fail(ErrorCode::DegenerateConfiguration,
         "weighted cross-covariance has rank < 2");
  }
  const Mat3& u = svd.matrixU();
  const Mat3& v = svd.matrixV();
  Mat3 d = Mat3::Identity();
  if ((v * u.transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  const Mat3 r = v * d * u.transpose();
  return RigidTransform::projected(r, cd - r * cs);
}

RigidTransform kabsch(const PointCloud& src, const PointCloud& dst,
                      std::span<const double> weights) {
  return kabsch(std::span<const Vec3>(src.points()),
                std::span<const Vec3>(dst.points()), weights);
}

RigidTransform kabsch(const PointCloud& src, const PointCloud& dst) {
  const std::vector<double> w(src.size(), 1.0);
  return kabsch(src, dst, w);
}

}  // namespace castreg
