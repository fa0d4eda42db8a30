#include "castreg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace castreg {

namespace {

constexpr double kDeg = 180.0 / std::numbers::pi;

double wrap_deg(double a) {
  double w = std::fmod(a, 360.0);
  if (w <= -180.0) w += 360.0;
  if (w > 180.0) w -= 360.0;
  return w;
}

ErrorStats finish(double sum_sq, double sum_abs, std::size_t count, bool gimbal) {
  ErrorStats s;
  if (count == 0) return s;
  s.mse = sum_sq / static_cast<double>(count);
  s.rmse = std::sqrt(s.mse);
  s.mae = sum_abs / static_cast<double>(count);
  s.gimbal_warning = gimbal;
  return s;
}

}  // namespace

Vec3 euler_zyx_deg(const Mat3& r) {
  const double yaw = std::atan2(r(1, 0), r(0, 0));
  const double pitch = std::asin(std::clamp(-r(2, 0), -1.0, 1.0));
  const double roll = std::atan2(r(2, 1), r(2, 2));
  return Vec3(yaw, pitch, roll) * kDeg;
}

ErrorStats rotation_errors(std::span<const Mat3> r_pred,
                           std::span<const Mat3> r_gt) {
  if (r_pred.size() != r_gt.size()) {
    fail(ErrorCode::SizeMismatch, "rotation_errors batch sizes differ");
  }
  double sq = 0.0, ab = 0.0;
  bool gimbal = false;
  for (std::size_t i = 0; i < r_pred.size(); ++i) {
    const Vec3 ep = euler_zyx_deg(r_pred[i]);
    const Vec3 eg = euler_zyx_deg(r_gt[i]);
    gimbal = gimbal || std::abs(ep[1]) > 89.9 || std::abs(eg[1]) > 89.9;
    for (int c = 0; c < 3; ++c) {
      const double d = wrap_deg(ep[c] - eg[c]);
      sq += d * d;
      ab += std::abs(d);
    }
  }
  return finish(sq, ab, 3 * r_pred.size(), gimbal);
}

ErrorStats rotation_errors(const Mat3& r_pred, const Mat3& r_gt) {
  return rotation_errors(std::span<const Mat3>(&r_pred, 1),
                         std::span<const Mat3>(&r_gt, 1));
}

ErrorStats translation_errors(std::span<const Vec3> t_pred,
                              std::span<const Vec3> t_gt) {
  if (t_pred.size() != t_gt.size()) {
    fail(ErrorCode::SizeMismatch, "translation_errors batch sizes differ");
  }
  double sq = 0.0, ab = 0.0;
  for (std::size_t i = 0; i < t_pred.size(); ++i) {
    const Vec3 d = t_pred[i] - t_gt[i];
    sq += d.squaredNorm();
    ab += d.cwiseAbs().sum();
  }
  return finish(sq, ab, 3 * t_pred.size(), false);
}

ErrorStats translation_errors(const Vec3& t_pred, const Vec3& t_gt) {
  return translation_errors(std::span<const Vec3>(&t_pred, 1),
                            std::span<const Vec3>(&t_gt, 1));
}

double point_rmse(std::span<const Vec3> a, std::span<const Vec3> b) {
  if (a.size() != b.size()) {
    fail(ErrorCode::SizeMismatch, "point_rmse on " + std::to_string(a.size()) +
                                      " vs " + std::to_string(b.size()) +
                                      " points");
  }
  if (a.empty()) return 0.0;
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sq += (a[i] - b[i]).squaredNorm();
  return std::sqrt(sq / static_cast<double>(a.size()));
}

double point_rmse(const PointCloud& a, const PointCloud& b) {
  return point_rmse(std::span<const Vec3>(a.points()),
                    std::span<const Vec3>(b.points()));
}

double rotation_error_rad(const Mat3& r_pred, const Mat3& r_gt) {
  return rotation_angle(r_pred * r_gt.transpose());
}

RegistrationMetrics evaluate(const RigidTransform& estimate,
                             const RigidTransform& truth,
                             std::span<const Vec3> probe,
                             double elapsed_seconds) {
  RegistrationMetrics m;
  const ErrorStats r = rotation_errors(estimate.rotation(), truth.rotation());
  const ErrorStats t = translation_errors(estimate.translation(), truth.translation());
  m.mse_r = r.mse;
  m.rmse_r = r.rmse;
  m.mae_r = r.mae;
  m.gimbal_warning = r.gimbal_warning;
  m.mse_t = t.mse;
  m.rmse_t = t.rmse;
  m.mae_t = t.mae;
  double sq = 0.0;
  for (const auto& p : probe) sq += ((estimate * p) - (truth * p)).squaredNorm();
  m.point_rmse = probe.empty() ? 0.0 : std::sqrt(sq / static_cast<double>(probe.size()));
  m.elapsed_seconds = elapsed_seconds;
  return m;
}

}  // namespace castreg
