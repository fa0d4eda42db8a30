#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "castreg/cloud_io.hpp"
#include "castreg/edcp.hpp"
#include "castreg/fusion.hpp"
#include "castreg/geometry.hpp"
#include "castreg/metrics.hpp"
#include "castreg/synth.hpp"

namespace castreg::pipeline {

enum class Method { Icp, Ndt, MsIcp, MsNdt, Edcp, Mdr, Medpnet };
inline constexpr std::array<Method, 7> kAllMethods{
    Method::Icp, Method::Ndt, Method::MsIcp, Method::MsNdt,
    Method::Edcp, Method::Mdr, Method::Medpnet};

std::string_view to_string(Method m) noexcept;
Method method_from_string(std::string_view name);
bool needs_edcp(Method m) noexcept;
bool needs_fusion(Method m) noexcept;

enum class MetricFrame { Normalized, Millimeters };
std::string_view to_string(MetricFrame f) noexcept;
MetricFrame frame_from_string(std::string_view name);

struct GenConfig {
  std::size_t pairs = 20;
  double train_fraction = 0.8;
  synth::PairSpec spec;  // seed is overridden per pair
};

struct EdcpTrainSettings {
  edcp::EdcpConfig model;
  edcp::TrainConfig train;
  // Each training pair is reduced to about this many points, keeping the
  // same surface samples on both sides so correspondences survive.
  std::size_t max_points = 256;
};

struct FusionSettings {
  fusion::FusionTrainConfig train;
  std::vector<std::size_t> widths{32, 64, 32};
  std::size_t samples = 300;
  // Channels start from the ground truth perturbed by a random rotation of
  // up to this angle and translation of up to this length (normalized
  // units), standing in for the coarse stage's residual error.
  double init_rotation_deg = 10.0;
  double init_translation = 0.05;
};

struct BenchConfig {
  std::vector<double> rotations_deg{10, 20, 30, 90};
  std::vector<double> translations_mm{100, 500, 1000};
  std::vector<double> noise_mm{0.0, 0.1};
  std::size_t pairs_per_cell = 5;
  std::size_t n_points = 1024;
  std::vector<Method> methods{kAllMethods.begin(), kAllMethods.end()};
};

struct RunConfig {
  std::filesystem::path dataset_dir = "data";
  std::filesystem::path checkpoint_dir = "checkpoints";
  std::filesystem::path output_dir = "out";
  Method method = Method::Medpnet;
  std::uint64_t seed = 0;
  MetricFrame frame = MetricFrame::Normalized;
  double budget_s = 60.0;
  std::size_t threads = 0;  // 0: hardware concurrency
  // The coarse stage runs on strided subsamples of at most this many points.
  std::size_t edcp_points = 256;

  GenConfig gen;
  EdcpTrainSettings edcp;
  FusionSettings fusion;
  fusion::MdrConfig mdr;
  BenchConfig bench;

  void validate() const;

  std::filesystem::path manifest_path() const { return dataset_dir / "manifest.json"; }
  std::filesystem::path edcp_checkpoint() const { return checkpoint_dir / "edcp.params"; }
  std::filesystem::path fusion_checkpoint() const { return checkpoint_dir / "fusion.params"; }
};

// JSON object with the RunConfig fields; every key is optional.
RunConfig load_config(const std::filesystem::path& path);
RunConfig config_from_json(std::string_view text);
std::string config_to_json(const RunConfig& cfg);

// Normalized source cloud of a dataset pair, regenerated from its seed.
PointCloud source_cloud(std::uint64_t seed, std::size_t n_points);

// Writes clouds under dataset_dir/clouds and dataset_dir/manifest.json.
io::DatasetManifest cmd_gen_data(const RunConfig& cfg);

struct TrainSummary {
  std::vector<double> history;
  std::filesystem::path checkpoint;
  std::filesystem::path loss_csv;
};

TrainSummary cmd_train_edcp(const RunConfig& cfg);
TrainSummary cmd_train_fusion(const RunConfig& cfg);

// Fusion samples from the manifest's train split (cycled to cfg.fusion.samples).
std::vector<fusion::FusionSample> fusion_samples(const RunConfig& cfg,
                                                 const io::DatasetManifest& manifest);

// Keeps the points whose provenance id is below a common bound so that about
// `max_points` of x survive; the same bound applies to y.
std::pair<PointCloud, PointCloud> reduce_pair(const PointCloud& x, const PointCloud& y,
                                              std::size_t max_points);

struct Models {
  std::optional<edcp::EdcpModel> edcp;
  std::optional<fusion::FusionMlp> fusion;
};

// Loads the checkpoints `methods` need (MissingCheckpoint otherwise).
Models load_models(const RunConfig& cfg, std::span<const Method> methods);

struct Registration {
  RigidTransform transform;
  double seconds = 0.0;
  std::optional<RigidTransform> coarse;  // edcp stage of medpnet
  std::optional<double> confidence;
  std::string diagnostics;  // JSON object
};

// Registers x onto y from the identity. Throws TimeBudgetExceeded when a
// stage finishes past the budget.
Registration register_pair(Method method, const PointCloud& x, const PointCloud& y,
                           const Models& models, const RunConfig& cfg);

struct RegisterOutput {
  Registration reg;
  std::filesystem::path record;
  std::optional<std::filesystem::path> aligned;
};

// Pair given by manifest index; writes <out>/register_<index>.json and, when
// `export_aligned`, the transformed source as PLY.
RegisterOutput cmd_register(const RunConfig& cfg, std::size_t pair_index,
                            bool export_aligned = false);
RegisterOutput cmd_register(const RunConfig& cfg, const std::filesystem::path& x_path,
                            const std::filesystem::path& y_path, bool export_aligned = false);

struct ExportPaths {
  std::filesystem::path source, target, aligned;
};

ExportPaths cmd_export(const RunConfig& cfg, const PointCloud& source, const PointCloud& target,
                       const RigidTransform& transform, const std::string& stem);
ExportPaths cmd_export(const RunConfig& cfg, std::size_t pair_index,
                       const RigidTransform& transform);

// 12 numbers: rotation row-major, then translation.
std::array<double, 12> transform_numbers(const RigidTransform& t);
RigidTransform transform_from_numbers(std::span<const double> v);
// Transform from a register record (JSON with a "transform" array).
RigidTransform read_transform(const std::filesystem::path& path);

struct BenchRow {
  std::string cell;
  std::string pair_id;
  Method method = Method::Icp;
  MetricFrame frame = MetricFrame::Normalized;
  RegistrationMetrics metrics;
  std::string status = "ok";  // ok, over_budget, or failed: <reason>

  bool ok() const { return status == "ok"; }
};

struct BenchAggregate {
  std::string cell;
  Method method = Method::Icp;
  std::size_t rows = 0, failed = 0;
  double mse_r = 0.0, rmse_r = 0.0, mae_r = 0.0;
  double mse_t = 0.0, rmse_t = 0.0, mae_t = 0.0;
  double point_rmse = 0.0, seconds = 0.0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::vector<BenchAggregate> aggregates;  // over successful rows per (cell, method)

  void write_csv(const std::filesystem::path& path) const;
  void write_aggregates_csv(const std::filesystem::path& path) const;
  std::string summary_json() const;
};

// Cell label, e.g. "r010_t0100_n0.1".
std::string cell_id(double rotation_deg, double translation_mm, double noise_mm);

// One benchmark pair: rotation of exactly `rotation_deg`, translation of
// exactly `translation_mm`, noise sigma `noise_mm`.
synth::RegistrationPair bench_pair(std::uint64_t source_seed, std::size_t n_points,
                                   double rotation_deg, double translation_mm, double noise_mm,
                                   std::uint64_t pair_seed);

std::vector<BenchAggregate> aggregate(std::span<const BenchRow> rows);

// Runs the grid over the manifest's test split; writes bench.csv,
// bench_cells.csv and bench_summary.json under the output dir.
BenchReport cmd_bench(const RunConfig& cfg);

// Frame conversion of metrics computed in normalized units.
RegistrationMetrics to_frame(const RegistrationMetrics& m, MetricFrame frame, double mm_per_unit);

}  // namespace castreg::pipeline
