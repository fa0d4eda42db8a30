#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "castreg/autodiff.hpp"
#include "castreg/geometry.hpp"

namespace castreg::edcp {

enum class AttentionVariant { DotProduct, Efficient };

std::string_view to_string(AttentionVariant v) noexcept;
AttentionVariant variant_from_string(std::string_view name);

struct EdcpConfig {
  std::size_t k_neighbors = 16;
  std::vector<std::size_t> widths{32, 64, 128};
  std::size_t d = 128;
  AttentionVariant variant = AttentionVariant::Efficient;
  std::size_t blocks = 2;  // serial
  std::size_t heads = 2;   // parallel
  double slope = 0.01;

  void validate() const;
};

struct TrainConfig {
  double lr = 0.001;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double momentum = 0.9;
  std::uint64_t seed = 0;

  void validate() const;
};

// k nearest neighbors per row, self excluded, ordered by (distance, index).
struct NeighborTable {
  std::size_t rows = 0;
  std::size_t k = 0;
  std::vector<std::size_t> index;  // rows * k

  std::span<const std::size_t> row(std::size_t i) const {
    return {index.data() + i * k, k};
  }
};

NeighborTable knn_graph(const PointCloud& cloud, std::size_t k);

// (N, c) features -> (N, k, 2c) with entry (i, j) = concat(x_i, x_j - x_i).
ad::Tensor edge_features(const ad::Tensor& x, const NeighborTable& nbr);
ad::Var edge_features(const ad::Var& x, const NeighborTable& nbr);

class EdcpModel {
 public:
  explicit EdcpModel(EdcpConfig config, std::uint64_t seed = 0);

  const EdcpConfig& config() const noexcept { return config_; }
  ad::ParamStore& params() noexcept { return params_; }
  const ad::ParamStore& params() const noexcept { return params_; }

  // Parameters go to `path`; the architecture to `path` + ".json".
  void save(const std::filesystem::path& path) const;
  static EdcpModel load(const std::filesystem::path& path);

 private:
  EdcpConfig config_;
  ad::ParamStore params_;
};

// Parameter access on a tape: trainable leaves when `train`, constants
// otherwise (no backward bookkeeping).
struct Weights {
  ad::Tape& tape;
  const ad::ParamStore& params;
  bool train = false;

  ad::Var operator()(const std::string& name) const {
    return train ? tape.param(params, name) : tape.constant(params.value(name));
  }
};

// Coordinates centered on the centroid and divided by the cloud radius, (N, 3).
ad::Tensor centered_points(const PointCloud& cloud);

ad::Var dgcnn_embed(const Weights& w, const EdcpConfig& cfg, const ad::Tensor& points,
                    const NeighborTable& nbr);
ad::Tensor dgcnn_embed(const EdcpModel& model, const PointCloud& cloud);

// Same layer computed through explicit edge features + shared matmul; used to
// cross-check the fused edge convolution.
ad::Var edge_conv_reference(const ad::Var& x, const ad::Var& weight, const ad::Var& bias,
                            const NeighborTable& nbr, double slope);
ad::Var edge_conv(const ad::Var& x, const ad::Var& weight, const ad::Var& bias,
                  const NeighborTable& nbr, double slope);

ad::Var dot_product_attention(const ad::Var& q, const ad::Var& k, const ad::Var& v);
ad::Var efficient_attention(const ad::Var& q, const ad::Var& k, const ad::Var& v);
ad::Tensor dot_product_attention(const ad::Tensor& q, const ad::Tensor& k, const ad::Tensor& v);
ad::Tensor efficient_attention(const ad::Tensor& q, const ad::Tensor& k, const ad::Tensor& v);

// One encoder block: queries from `a`, keys and values from `b`.
ad::Var cross_block(const Weights& w, const EdcpConfig& cfg, std::size_t block,
                    const ad::Var& a, const ad::Var& b);
std::pair<ad::Var, ad::Var> cross_encode(const Weights& w, const EdcpConfig& cfg,
                                         const ad::Var& fx, const ad::Var& fy);
std::pair<ad::Tensor, ad::Tensor> cross_encode(const EdcpModel& model, const ad::Tensor& fx,
                                               const ad::Tensor& fy);

struct SoftMatch {
  ad::Tensor m;             // (N, M) row-stochastic
  std::vector<Vec3> y_hat;  // m * Y
};

SoftMatch soft_match(const ad::Tensor& phi_x, const ad::Tensor& phi_y, const PointCloud& y);

struct EdcpResult {
  RigidTransform transform;
  double confidence = 0.0;  // mean of the row maxima of m
};

EdcpResult edcp_register(const EdcpModel& model, const PointCloud& x, const PointCloud& y);

struct TrainPair {
  PointCloud x;
  PointCloud y;
  std::vector<std::pair<std::size_t, std::size_t>> correspondence;  // (x idx, y idx)
};

// Pairs points whose provenance ids agree.
std::vector<std::pair<std::size_t, std::size_t>> correspondences_from_provenance(
    const PointCloud& x, const PointCloud& y);

// Mean cross-entropy of the match rows of corresponding x points against
// their y index.
ad::Var match_loss(const Weights& w, const EdcpConfig& cfg, const TrainPair& pair);

struct TrainResult {
  std::vector<double> history;  // mean loss per epoch, measured before each update
};

TrainResult train_edcp(EdcpModel& model, std::span<const TrainPair> pairs,
                       const TrainConfig& cfg);

struct TimingRow {
  std::size_t n = 0;
  double seconds = 0.0;  // median
};

// Forward-only attention timings on random (n, d) inputs.
std::vector<TimingRow> complexity_probe(std::span<const std::size_t> sizes, std::size_t d,
                                        AttentionVariant variant, std::size_t repeats = 5,
                                        std::uint64_t seed = 0);

}  // namespace castreg::edcp
