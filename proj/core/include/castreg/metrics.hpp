#pragma once

#include <span>
#include <vector>

#include "castreg/geometry.hpp"

namespace castreg {

// Intrinsic Z-Y-X (yaw, pitch, roll) angles in degrees.
Vec3 euler_zyx_deg(const Mat3& r);

struct ErrorStats {
  double mse = 0.0;
  double rmse = 0.0;
  double mae = 0.0;
  // Set when any rotation had |pitch| > 89.9 degrees; values are still valid
  // but Euler residuals are ill-conditioned there.
  bool gimbal_warning = false;
};

// Per-component Euler residuals, wrapped to (-180, 180], averaged over the
// three components and over all pairs.
ErrorStats rotation_errors(const Mat3& r_pred, const Mat3& r_gt);
ErrorStats rotation_errors(std::span<const Mat3> r_pred, std::span<const Mat3> r_gt);
ErrorStats translation_errors(const Vec3& t_pred, const Vec3& t_gt);
ErrorStats translation_errors(std::span<const Vec3> t_pred,
                              std::span<const Vec3> t_gt);

// Root mean squared distance between index-paired points.
double point_rmse(std::span<const Vec3> a, std::span<const Vec3> b);
double point_rmse(const PointCloud& a, const PointCloud& b);

// Geodesic rotation error in radians.
double rotation_error_rad(const Mat3& r_pred, const Mat3& r_gt);

struct RegistrationMetrics {
  double mse_r = 0.0, rmse_r = 0.0, mae_r = 0.0;  // deg^2, deg, deg
  double mse_t = 0.0, rmse_t = 0.0, mae_t = 0.0;  // cloud unit
  double point_rmse = 0.0;
  double elapsed_seconds = 0.0;
  bool gimbal_warning = false;
};

// Metrics of an estimate against ground truth. point_rmse compares the
// estimate and ground truth applied to `probe`.
RegistrationMetrics evaluate(const RigidTransform& estimate,
                             const RigidTransform& truth,
                             std::span<const Vec3> probe,
                             double elapsed_seconds = 0.0);

}  // namespace castreg
