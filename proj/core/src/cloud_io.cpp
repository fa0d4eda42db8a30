#include "castreg/cloud_io.hpp"

#include <json.hpp>

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace castreg::io {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void parse_error(const fs::path& path, std::size_t line,
                              const std::string& what) {
  fail(ErrorCode::ParseError,
       path.string() + ":" + std::to_string(line) + ": " + what);
}

std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

bool parse_double(std::string_view tok, double& out) {
  const char* end = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(tok.data(), end, out);
  return ec == std::errc() && ptr == end && std::isfinite(out);
}

std::ifstream open_in(const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorCode::MissingFile, path.string() + " does not exist");
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  return in;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  return out;
}

std::string fmt9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

PointCloud read_ply(const fs::path& path, Unit default_unit) {
  std::ifstream in = open_in(path);
  std::string line;
  std::size_t lineno = 0;
  auto next = [&]() -> bool {
    if (!std::getline(in, line)) return false;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  };

  if (!next()) parse_error(path, 1, "empty file");
  if (line != "ply") parse_error(path, lineno, "missing 'ply' magic");

  Unit unit = default_unit;
  double mm_per_unit = 1.0;
  std::size_t count = 0;
  bool have_vertex = false;
  std::vector<std::string> props;
  for (;;) {
    if (!next()) parse_error(path, lineno + 1, "unterminated header");
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok[0] == "end_header") break;
    if (tok[0] == "format") {
      if (tok.size() != 3 || tok[1] != "ascii" || tok[2] != "1.0") {
        parse_error(path, lineno, "only 'format ascii 1.0' is supported");
      }
    } else if (tok[0] == "comment") {
      if (tok.size() == 3 && tok[1] == "unit") {
        unit = unit_from_string(tok[2]);
      } else if (tok.size() == 3 && tok[1] == "mm_per_unit") {
        if (!parse_double(tok[2], mm_per_unit)) parse_error(path, lineno, "bad mm_per_unit");
      }
    } else if (tok[0] == "element") {
      if (tok.size() != 3 || tok[1] != "vertex" || have_vertex) {
        parse_error(path, lineno, "expected a single 'element vertex N'");
      }
      double n = 0.0;
      if (!parse_double(tok[2], n) || n < 0.0 || n != std::floor(n)) {
        parse_error(path, lineno, "bad vertex count");
      }
      count = static_cast<std::size_t>(n);
      have_vertex = true;
    } else if (tok[0] == "property") {
      if (!have_vertex || tok.size() != 3) parse_error(path, lineno, "bad property line");
      props.emplace_back(tok[2]);
    } else {
      parse_error(path, lineno, "unexpected header line '" + line + "'");
    }
  }
  auto find = [&](const std::string& name) -> int {
    for (std::size_t i = 0; i < props.size(); ++i)
      if (props[i] == name) return static_cast<int>(i);
    return -1;
  };
  const int ix = find("x"), iy = find("y"), iz = find("z"), ip = find("provenance");
  if (ix < 0 || iy < 0 || iz < 0) parse_error(path, lineno, "vertex needs x, y, z");
  if (count == 0) parse_error(path, lineno, "no vertices");

  std::vector<Vec3> pts;
  std::vector<std::int64_t> prov;
  pts.reserve(count);
  std::vector<double> vals(props.size());
  for (std::size_t v = 0; v < count; ++v) {
    if (!next()) parse_error(path, lineno + 1, "expected " + std::to_string(count) + " vertices");
    const auto tok = split_ws(line);
    if (tok.size() != props.size()) parse_error(path, lineno, "wrong number of values");
    for (std::size_t k = 0; k < tok.size(); ++k) {
      if (!parse_double(tok[k], vals[k])) parse_error(path, lineno, "bad number");
    }
    pts.emplace_back(vals[ix], vals[iy], vals[iz]);
    if (ip >= 0) prov.push_back(static_cast<std::int64_t>(vals[ip]));
  }
  return {std::move(pts), unit, std::move(prov), mm_per_unit};
}

PointCloud read_xyz(const fs::path& path, Unit unit) {
  std::ifstream in = open_in(path);
  std::string line;
  std::size_t lineno = 0;
  std::vector<Vec3> pts;
  while (std::getline(in, line)) {
    ++lineno;
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok.size() != 3) parse_error(path, lineno, "expected 3 values");
    Vec3 p;
    for (int k = 0; k < 3; ++k)
      if (!parse_double(tok[k], p[k])) parse_error(path, lineno, "bad number");
    pts.push_back(p);
  }
  if (pts.empty()) parse_error(path, lineno + 1, "no points");
  return {std::move(pts), unit};
}

}  // namespace

CloudFormat format_for(const fs::path& path) {
  const std::string ext = path.extension().string();
  if (ext == ".ply") return CloudFormat::Ply;
  if (ext == ".xyz") return CloudFormat::Xyz;
  fail(ErrorCode::InvalidArgument, "unknown cloud extension '" + ext + "'");
}

void write_cloud(const fs::path& path, const PointCloud& cloud) {
  write_cloud(path, cloud, format_for(path));
}

void write_cloud(const fs::path& path, const PointCloud& cloud, CloudFormat format) {
  std::ofstream out = open_out(path);
  if (format == CloudFormat::Ply) {
    out << "ply\nformat ascii 1.0\n"
        << "comment unit " << to_string(cloud.unit()) << "\n"
        << "comment mm_per_unit " << fmt17(cloud.mm_per_unit()) << "\n"
        << "element vertex " << cloud.size() << "\n"
        << "property float x\nproperty float y\nproperty float z\n";
    if (cloud.has_provenance()) out << "property int provenance\n";
    out << "end_header\n";
  }
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud[i];
    out << fmt9(p.x()) << ' ' << fmt9(p.y()) << ' ' << fmt9(p.z());
    if (format == CloudFormat::Ply && cloud.has_provenance()) {
      out << ' ' << cloud.provenance()[i];
    }
    out << '\n';
  }
  if (!out) fail(ErrorCode::IoError, "write failed for " + path.string());
}

PointCloud read_cloud(const fs::path& path) {
  return read_cloud(path, format_for(path));
}

PointCloud read_cloud(const fs::path& path, CloudFormat format, Unit default_unit) {
  return format == CloudFormat::Ply ? read_ply(path, default_unit)
                                    : read_xyz(path, default_unit);
}

std::vector<const PairRecord*> DatasetManifest::split(const std::string& tag) const {
  std::vector<const PairRecord*> out;
  for (const auto& p : pairs)
    if (p.split == tag) out.push_back(&p);
  return out;
}

fs::path resolve(const fs::path& manifest_path, const std::string& relative) {
  const fs::path p(relative);
  if (p.is_absolute()) return p;
  return manifest_path.parent_path() / p;
}

void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
  json pairs = json::array();
  for (const auto& r : manifest.pairs) {
    pairs.push_back({{"x_path", r.x_path},
                     {"y_path", r.y_path},
                     {"transform", r.transform.to_array()},
                     {"unit", std::string(to_string(r.unit))},
                     {"seed", r.seed},
                     {"split", r.split},
                     {"mm_per_unit", r.mm_per_unit}});
  }
  std::ofstream out = open_out(path);
  out << json{{"pairs", pairs}}.dump(2) << '\n';
  if (!out) fail(ErrorCode::IoError, "write failed for " + path.string());
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in = open_in(path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
  DatasetManifest manifest;
  try {
    for (const auto& item : doc.at("pairs")) {
      PairRecord r;
      r.x_path = item.at("x_path").get<std::string>();
      r.y_path = item.at("y_path").get<std::string>();
      const auto t = item.at("transform").get<std::vector<double>>();
      r.transform = RigidTransform::from_array(t);
      r.unit = unit_from_string(item.at("unit").get<std::string>());
      r.seed = item.at("seed").get<std::uint64_t>();
      r.split = item.at("split").get<std::string>();
      r.mm_per_unit = item.value("mm_per_unit", 1.0);
      for (const auto* rel : {&r.x_path, &r.y_path}) {
        if (!fs::exists(resolve(path, *rel))) {
          fail(ErrorCode::MissingFile, "manifest references missing " + *rel);
        }
      }
      manifest.pairs.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
  return manifest;
}

}  // namespace castreg::io
