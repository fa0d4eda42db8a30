#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "castreg/geometry.hpp"

namespace castreg::io {

enum class CloudFormat { Ply, Xyz };

// Format from the file extension (.ply / .xyz); throws InvalidArgument otherwise.
CloudFormat format_for(const std::filesystem::path& path);

// PLY is ascii 1.0, vertex-only, float x y z (plus an int provenance property
// when the cloud carries one). Coordinates are written with 9 significant
// digits. Unit and scale ride along as PLY comments.
void write_cloud(const std::filesystem::path& path, const PointCloud& cloud);
void write_cloud(const std::filesystem::path& path, const PointCloud& cloud,
                 CloudFormat format);
PointCloud read_cloud(const std::filesystem::path& path);
PointCloud read_cloud(const std::filesystem::path& path, CloudFormat format,
                      Unit default_unit = Unit::Normalized);

struct PairRecord {
  std::string x_path;  // relative to the manifest directory unless absolute
  std::string y_path;
  RigidTransform transform;
  Unit unit = Unit::Normalized;
  std::uint64_t seed = 0;
  std::string split = "train";
  double mm_per_unit = 1.0;
};

struct DatasetManifest {
  std::vector<PairRecord> pairs;

  std::vector<const PairRecord*> split(const std::string& tag) const;
};

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
// Validates that every referenced cloud exists (MissingFile) and that every
// transform is in SE(3).
DatasetManifest read_manifest(const std::filesystem::path& path);

std::filesystem::path resolve(const std::filesystem::path& manifest_path,
                              const std::string& relative);

}  // namespace castreg::io
