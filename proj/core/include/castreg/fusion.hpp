#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "castreg/autodiff.hpp"
#include "castreg/geometry.hpp"
#include "castreg/kdtree.hpp"
#include "castreg/msreg.hpp"

namespace castreg::fusion {

inline constexpr std::size_t kFeatureDim = 14;

using Features = std::array<double, kFeatureDim>;

// concat(log T1, log T2, rmse1, rmse2); twists ordered (rho, theta).
Features fusion_features(const RigidTransform& t1, const RigidTransform& t2, double rmse1,
                         double rmse2);

class FusionMlp {
 public:
  explicit FusionMlp(std::vector<std::size_t> widths = {32, 64, 32}, std::uint64_t seed = 0);

  static FusionMlp zeros(std::vector<std::size_t> widths = {32, 64, 32});

  const std::vector<std::size_t>& widths() const noexcept { return widths_; }
  ad::ParamStore& params() noexcept { return params_; }
  const ad::ParamStore& params() const noexcept { return params_; }

  // Features enter as (f - shift) / scale. Identity (0, 1) by default; the
  // statistics are not trained, so they are set once before training.
  void set_input_normalization(const Features& shift, const Features& scale);
  const Features& input_shift() const noexcept { return shift_; }
  const Features& input_scale() const noexcept { return scale_; }

  // (1, 14) -> (1, 2) softmax weights.
  ad::Var forward(ad::Tape& tape, const ad::Var& features, bool train) const;

  void save(const std::filesystem::path& path) const;
  static FusionMlp load(const std::filesystem::path& path);

 private:
  std::vector<std::size_t> widths_;
  ad::ParamStore params_;
  Features shift_{};
  Features scale_;
};

struct BlendWeights {
  double w1 = 0.5;
  double w2 = 0.5;
};

BlendWeights fusion_forward(const FusionMlp& mlp, std::span<const double> features);

// exp(w1 log T1 + w2 log T2 + eps). The weights are not required to sum to one
// here so that finite differences can move them independently.
RigidTransform blend_transforms(const RigidTransform& t1, const RigidTransform& t2, double w1,
                                double w2, const Twist& eps = {});

struct FusionSample {
  RigidTransform t1, t2;
  double rmse1 = 0.0, rmse2 = 0.0;
  RigidTransform truth;
  std::vector<Vec3> x_sub;  // fixed source subsample used by the loss
  std::string id;
};

struct FusionTrainConfig {
  double delta = 0.05;  // Huber threshold, cloud units
  double lr = 0.1;
  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  double momentum = 0.9;
  double fd_step = 1e-6;
  std::uint64_t seed = 0;

  void validate() const;
};

// Registration error a_i of blending sample s with weights (w1, w2).
double blend_error(const FusionSample& s, double w1, double w2);

// Per-feature mean and standard deviation over the samples (deviation 1 for
// constant features), for set_input_normalization.
std::pair<Features, Features> feature_statistics(std::span<const FusionSample> samples);

struct FusionTrainResult {
  std::vector<double> history;  // mean Huber loss per epoch, before each update
};

FusionTrainResult train_fusion(FusionMlp& mlp, std::span<const FusionSample> samples,
                               const FusionTrainConfig& cfg);

// Up to `n` points of `cloud` at an even stride.
std::vector<Vec3> strided_subsample(const PointCloud& cloud, std::size_t n);

// Root mean squared distance from each point to its nearest neighbor in
// `tree`, each distance capped at `cap`.
double nn_rmse(std::span<const Vec3> points, const KdTree& tree,
               double cap = std::numeric_limits<double>::infinity());

struct EpsilonFilterConfig {
  double s0 = 0.01;
  double shrink = 0.5;
  double min_step = 1e-5;
  std::size_t max_iterations = 10;
  std::size_t subsample = 1024;
  // Length that one translation step of size s is multiplied by (rotation
  // steps are in radians). The cloud overload sets it from the cloud unit.
  double translation_unit = 1.0;
  // Nearest-neighbor distances are capped at this multiple of the target's
  // median point spacing, so points without a counterpart (partial overlap)
  // stop pulling the estimate. 0 disables the cap.
  double truncation_factor = 0.5;

  void validate() const;
  double cap(const KdTree& y) const;
};

struct EpsilonResult {
  Twist eps;
  double rmse = 0.0;
  double initial_rmse = 0.0;  // at eps = 0
  std::vector<double> trace;  // incumbent rmse after each outer iteration
};

// Pattern search over eps in (rho, theta) around exp(base + eps).
EpsilonResult epsilon_filter(std::span<const Vec3> x_sub, const KdTree& y, const Twist& base,
                             const EpsilonFilterConfig& cfg);
EpsilonResult epsilon_filter(const PointCloud& x, const PointCloud& y,
                             const RigidTransform& blend, const EpsilonFilterConfig& cfg);

struct MdrConfig {
  msreg::PyramidConfig pyramid;
  msreg::IcpConfig icp;
  msreg::NdtConfig ndt;
  // 10 outer iterations move each twist coordinate only a few steps; the
  // pipeline allows more so the blend can travel back from a failed channel.
  EpsilonFilterConfig eps{.max_iterations = 30};
};

struct MdrResult {
  RigidTransform transform;
  RigidTransform t1, t2;
  double rmse1 = 0.0, rmse2 = 0.0;  // channel capped nearest-neighbor rmse
  BlendWeights weights;
  Twist eps;
  double rmse = 0.0;  // capped nearest-neighbor rmse of the fused transform
  msreg::MultiscaleResult icp, ndt;

  std::string diagnostics_json() const;
};

// Both channels from `init`, blended by the MLP and refined by the filter.
MdrResult mdr_register(const PointCloud& x, const PointCloud& y, const RigidTransform& init,
                       const FusionMlp& mlp, const MdrConfig& cfg);

// Channel outputs for one pair, reused by training-sample construction.
struct ChannelOutputs {
  msreg::MultiscaleResult icp, ndt;
  double rmse1 = 0.0, rmse2 = 0.0;
};

ChannelOutputs run_channels(const PointCloud& x, const PointCloud& y, const RigidTransform& init,
                            const MdrConfig& cfg);

}  // namespace castreg::fusion
