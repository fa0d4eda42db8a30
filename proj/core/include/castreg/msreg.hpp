#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "castreg/geometry.hpp"
#include "castreg/kdtree.hpp"

namespace castreg::msreg {

// Voxel edges as fractions of the target's bounding-box diagonal, coarse to
// fine. With L levels the last L fractions are used; the finest level keeps
// the original points and its fraction only sizes the NDT cells there.
struct PyramidConfig {
  std::size_t levels = 3;
  std::vector<double> fractions{0.10, 0.05, 0.025};

  void validate() const;
  // Voxel edge of `level` (0 = coarsest) for a cloud of the given diagonal.
  double voxel(std::size_t level, double diagonal) const;
};

struct IcpConfig {
  std::size_t max_iterations = 50;
  double rejection_factor = 2.0;                // times the median NN spacing of Y
  std::optional<double> rejection_distance;     // absolute override
  double twist_tol = 1e-9;
  double rmse_tol = 1e-8;

  void validate() const;
};

struct NdtConfig {
  std::size_t max_iterations = 30;
  double lambda0 = 1e-6;
  double backoff = 10.0;
  std::size_t max_backoffs = 12;
  double twist_tol = 1e-9;
  double score_tol = 1e-8;
  // Per-point cost cap; points outside valid cells pay the cap.
  double cost_cap = 5.67;

  void validate() const;
};

// Centroids of occupied voxels (key floor(p / voxel)), in order of first
// appearance. Provenance is dropped.
PointCloud voxel_downsample(const PointCloud& cloud, double voxel);

// Coarse to fine; the last entry is `cloud` itself.
std::vector<PointCloud> build_pyramid(const PointCloud& cloud, const PyramidConfig& cfg);
std::vector<PointCloud> build_pyramid(const PointCloud& cloud, const PyramidConfig& cfg,
                                      double diagonal);

struct IcpResult {
  RigidTransform transform;
  double rmse = 0.0;            // over accepted pairs at the final transform
  std::size_t iterations = 0;
  std::size_t accepted = 0;
  // Truncated RMSE sqrt(mean(min(d^2, tau^2))) before each update; this is
  // the quantity each iteration cannot increase.
  std::vector<double> trace;
};

IcpResult icp(const PointCloud& x, const PointCloud& y, const RigidTransform& init,
              const IcpConfig& cfg = {});

using CellKey = std::array<std::int64_t, 3>;

struct NdtCell {
  std::size_t count = 0;
  Vec3 mean = Vec3::Zero();
  Mat3 cov = Mat3::Identity();
  Mat3 inv = Mat3::Identity();
};

class NdtGrid {
 public:
  NdtGrid(double cell_size, std::map<CellKey, NdtCell> cells);

  double cell_size() const noexcept { return cell_size_; }
  std::size_t size() const noexcept { return cells_.size(); }
  const std::map<CellKey, NdtCell>& cells() const noexcept { return cells_; }
  CellKey key(const Vec3& p) const;
  const NdtCell* find(const Vec3& p) const;

 private:
  double cell_size_;
  std::map<CellKey, NdtCell> cells_;
};

NdtGrid build_ndt_grid(const PointCloud& y, double cell_size);

struct NdtEvaluation {
  double score = 0.0;
  Vec6 gradient = Vec6::Zero();  // w.r.t. (rho, theta): R <- Exp(theta) R, t <- t + rho
  Eigen::Matrix<double, 6, 6> hessian = Eigen::Matrix<double, 6, 6>::Zero();  // Gauss-Newton
  std::size_t inside = 0;
};

NdtEvaluation evaluate_ndt(const PointCloud& x, const NdtGrid& grid, const RigidTransform& t,
                           const NdtConfig& cfg = {});
// The perturbation used by evaluate_ndt's derivatives.
RigidTransform perturb(const RigidTransform& t, const Vec6& delta);

struct NdtResult {
  RigidTransform transform;
  double score = 0.0;
  std::size_t iterations = 0;
  std::vector<double> trace;  // score after each accepted step, first entry at init
};

NdtResult ndt(const PointCloud& x, const NdtGrid& grid, const RigidTransform& init,
              const NdtConfig& cfg = {});

struct LevelRecord {
  std::size_t level = 0;
  double voxel = 0.0;
  std::size_t points = 0;
  double value = 0.0;                 // final rmse (ICP) or score (NDT)
  std::size_t iterations = 0;
  std::vector<double> trace;
  bool failed = false;
  std::string error;
};

struct MultiscaleResult {
  RigidTransform transform;
  std::vector<LevelRecord> levels;

  bool any_failed() const;
  // CSV with columns level, iteration, value.
  void write_trace_csv(const std::filesystem::path& path) const;
};

MultiscaleResult multiscale_icp(const PointCloud& x, const PointCloud& y,
                                const PyramidConfig& pyramid, const IcpConfig& cfg,
                                const RigidTransform& init);
MultiscaleResult multiscale_ndt(const PointCloud& x, const PointCloud& y,
                                const PyramidConfig& pyramid, const NdtConfig& cfg,
                                const RigidTransform& init);

// NDT cell edge at `level` of `levels`: twice the level's voxel at the finest
// level, doubling again for each coarser level, so the coarse grids are wide
// enough to capture large offsets.
inline double ndt_cell_size(double voxel, std::size_t level, std::size_t levels) {
  return 2.0 * voxel * static_cast<double>(std::size_t{1} << (levels - 1 - level));
}

}  // namespace castreg::msreg
