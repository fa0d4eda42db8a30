#include "castreg/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "castreg/kdtree.hpp"
#include "castreg/msreg.hpp"

namespace castreg::pipeline {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

constexpr std::array<std::string_view, 7> kMethodNames{"icp",  "ndt", "ms-icp", "ms-ndt",
                                                       "edcp", "mdr", "medpnet"};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::size_t thread_count(const RunConfig& cfg) {
  if (cfg.threads > 0) return cfg.threads;
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, n) on a small pool. Every index writes only its own
// slot, so results do not depend on scheduling. The first exception (lowest
// index) is rethrown after all workers finish.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t t = std::min(threads, n);
  if (t <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < t; ++k) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::string format(const char* fmt, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

std::string num(double v) { return format("%.17g", v); }

PointCloud strided(const PointCloud& cloud, std::size_t n) {
  if (cloud.size() <= n) return cloud;
  const std::size_t stride = cloud.size() / n;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < cloud.size() && idx.size() < n; i += stride) idx.push_back(i);
  return cloud.select(idx);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out << text;
  if (!out) fail(ErrorCode::IoError, "write failed for " + path.string());
}

void check_budget(const RunConfig& cfg, Clock::time_point t0, const char* stage) {
  const double el = seconds_since(t0);
  if (el > cfg.budget_s) {
    fail(ErrorCode::TimeBudgetExceeded, std::string(stage) + " finished after " +
                                            format("%.3f", el) + " s, budget " +
                                            format("%.3f", cfg.budget_s) + " s");
  }
}

json transform_json(const RigidTransform& t) {
  const auto v = transform_numbers(t);
  return json(std::vector<double>(v.begin(), v.end()));
}

// ---- config (de)serialization ----

template <class T>
void get(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end() && !it->is_null()) out = it->get<T>();
}

void reject_unknown(const json& j, std::initializer_list<std::string_view> keys,
                    const std::string& where) {
  if (!j.is_object()) fail(ErrorCode::ParseError, where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(keys.begin(), keys.end(), it.key()) == keys.end()) {
      fail(ErrorCode::ParseError, "unknown config key '" + where + it.key() + "'");
    }
  }
}

void read_pair_spec(const json& j, synth::PairSpec& s) {
  reject_unknown(j,
                 {"pairs", "train_fraction", "n_points", "rotation_range_deg",
                  "translation_range_mm", "translation_norm_mm", "scale_range", "overlap_ratio",
                  "noise_sigma_mm", "erase"},
                 "gen.");
  get(j, "n_points", s.n_points);
  get(j, "rotation_range_deg", s.rotation_range_deg);
  get(j, "translation_range_mm", s.translation_range_mm);
  if (auto it = j.find("translation_norm_mm"); it != j.end()) {
    if (it->is_null()) {
      s.translation_norm_mm.reset();
    } else {
      s.translation_norm_mm = it->get<double>();
    }
  }
  get(j, "scale_range", s.scale_range);
  get(j, "overlap_ratio", s.overlap_ratio);
  get(j, "noise_sigma_mm", s.noise_sigma_mm);
  if (auto it = j.find("erase"); it != j.end()) {
    reject_unknown(*it, {"count", "radius"}, "gen.erase.");
    get(*it, "count", s.erase.count);
    get(*it, "radius", s.erase.radius);
  }
}

void read_mdr(const json& j, fusion::MdrConfig& m) {
  reject_unknown(j, {"pyramid", "icp", "ndt", "eps"}, "mdr.");
  if (auto it = j.find("pyramid"); it != j.end()) {
    reject_unknown(*it, {"levels", "fractions"}, "mdr.pyramid.");
    get(*it, "levels", m.pyramid.levels);
    get(*it, "fractions", m.pyramid.fractions);
  }
  if (auto it = j.find("icp"); it != j.end()) {
    reject_unknown(*it,
                   {"max_iterations", "rejection_factor", "rejection_distance", "twist_tol",
                    "rmse_tol"},
                   "mdr.icp.");
    get(*it, "max_iterations", m.icp.max_iterations);
    get(*it, "rejection_factor", m.icp.rejection_factor);
    if (auto r = it->find("rejection_distance"); r != it->end()) {
      if (r->is_null()) {
        m.icp.rejection_distance.reset();
      } else {
        m.icp.rejection_distance = r->get<double>();
      }
    }
    get(*it, "twist_tol", m.icp.twist_tol);
    get(*it, "rmse_tol", m.icp.rmse_tol);
  }
  if (auto it = j.find("ndt"); it != j.end()) {
    reject_unknown(*it,
                   {"max_iterations", "lambda0", "backoff", "max_backoffs", "twist_tol",
                    "score_tol", "cost_cap"},
                   "mdr.ndt.");
    get(*it, "max_iterations", m.ndt.max_iterations);
    get(*it, "lambda0", m.ndt.lambda0);
    get(*it, "backoff", m.ndt.backoff);
    get(*it, "max_backoffs", m.ndt.max_backoffs);
    get(*it, "twist_tol", m.ndt.twist_tol);
    get(*it, "score_tol", m.ndt.score_tol);
    get(*it, "cost_cap", m.ndt.cost_cap);
  }
  if (auto it = j.find("eps"); it != j.end()) {
    reject_unknown(*it,
                   {"s0", "shrink", "min_step", "max_iterations", "subsample",
                    "truncation_factor"},
                   "mdr.eps.");
    get(*it, "s0", m.eps.s0);
    get(*it, "shrink", m.eps.shrink);
    get(*it, "min_step", m.eps.min_step);
    get(*it, "max_iterations", m.eps.max_iterations);
    get(*it, "subsample", m.eps.subsample);
    get(*it, "truncation_factor", m.eps.truncation_factor);
  }
}

}  // namespace

std::string_view to_string(Method m) noexcept { return kMethodNames[static_cast<int>(m)]; }

Method method_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kMethodNames.size(); ++i) {
    if (kMethodNames[i] == name) return kAllMethods[i];
  }
  fail(ErrorCode::InvalidArgument, "unknown method '" + std::string(name) +
                                       "' (icp, ndt, ms-icp, ms-ndt, edcp, mdr, medpnet)");
}

bool needs_edcp(Method m) noexcept { return m == Method::Edcp || m == Method::Medpnet; }
bool needs_fusion(Method m) noexcept { return m == Method::Mdr || m == Method::Medpnet; }

std::string_view to_string(MetricFrame f) noexcept {
  return f == MetricFrame::Normalized ? "normalized" : "millimeters";
}

MetricFrame frame_from_string(std::string_view name) {
  if (name == "normalized") return MetricFrame::Normalized;
  if (name == "millimeters" || name == "mm") return MetricFrame::Millimeters;
  fail(ErrorCode::InvalidArgument,
       "unknown metric frame '" + std::string(name) + "' (normalized, millimeters)");
}

void RunConfig::validate() const {
  if (!(budget_s > 0.0)) fail(ErrorCode::InvalidArgument, "time budget must be positive");
  if (edcp_points < 3) fail(ErrorCode::InvalidArgument, "edcp_points must be at least 3");
  if (gen.pairs == 0) fail(ErrorCode::InvalidArgument, "gen.pairs must be positive");
  if (!(gen.train_fraction >= 0.0 && gen.train_fraction <= 1.0)) {
    fail(ErrorCode::InvalidArgument, "gen.train_fraction must be in [0, 1]");
  }
  gen.spec.validate();
  edcp.model.validate();
  edcp.train.validate();
  if (edcp.max_points < 8) fail(ErrorCode::InvalidArgument, "edcp.max_points must be >= 8");
  fusion.train.validate();
  if (fusion.samples < 10) fail(ErrorCode::InvalidArgument, "fusion.samples must be >= 10");
  if (!(fusion.init_rotation_deg >= 0.0) || !(fusion.init_translation >= 0.0)) {
    fail(ErrorCode::InvalidArgument, "fusion init perturbation must be nonnegative");
  }
  mdr.pyramid.validate();
  mdr.icp.validate();
  mdr.ndt.validate();
  mdr.eps.validate();
  if (bench.rotations_deg.empty() || bench.translations_mm.empty() || bench.noise_mm.empty() ||
      bench.methods.empty() || bench.pairs_per_cell == 0) {
    fail(ErrorCode::InvalidArgument, "bench grid must be nonempty");
  }
  if (bench.n_points < 16) fail(ErrorCode::InvalidArgument, "bench.n_points must be >= 16");
  for (double n : bench.noise_mm)
    if (!(n >= 0.0)) fail(ErrorCode::InvalidArgument, "bench noise must be nonnegative");
}

RunConfig config_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, std::string("config: ") + e.what());
  }
  RunConfig c;
  try {
    reject_unknown(j,
                   {"dataset_dir", "checkpoint_dir", "output_dir", "method", "seed", "frame",
                    "budget_s", "threads", "edcp_points", "gen", "edcp", "fusion", "mdr",
                    "bench"},
                   "");
    std::string s;
    if (j.contains("dataset_dir")) c.dataset_dir = j.at("dataset_dir").get<std::string>();
    if (j.contains("checkpoint_dir")) c.checkpoint_dir = j.at("checkpoint_dir").get<std::string>();
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("method")) c.method = method_from_string(j.at("method").get<std::string>());
    get(j, "seed", c.seed);
    if (j.contains("frame")) c.frame = frame_from_string(j.at("frame").get<std::string>());
    get(j, "budget_s", c.budget_s);
    get(j, "threads", c.threads);
    get(j, "edcp_points", c.edcp_points);
    if (auto it = j.find("gen"); it != j.end()) {
      read_pair_spec(*it, c.gen.spec);
      get(*it, "pairs", c.gen.pairs);
      get(*it, "train_fraction", c.gen.train_fraction);
    }
    if (auto it = j.find("edcp"); it != j.end()) {
      reject_unknown(*it,
                     {"k_neighbors", "widths", "d", "variant", "blocks", "heads", "slope", "lr",
                      "epochs", "batch_size", "momentum", "max_points"},
                     "edcp.");
      auto& m = c.edcp.model;
      get(*it, "k_neighbors", m.k_neighbors);
      get(*it, "widths", m.widths);
      get(*it, "d", m.d);
      if (it->contains("variant")) {
        m.variant = edcp::variant_from_string(it->at("variant").get<std::string>());
      }
      get(*it, "blocks", m.blocks);
      get(*it, "heads", m.heads);
      get(*it, "slope", m.slope);
      get(*it, "lr", c.edcp.train.lr);
      get(*it, "epochs", c.edcp.train.epochs);
      get(*it, "batch_size", c.edcp.train.batch_size);
      get(*it, "momentum", c.edcp.train.momentum);
      get(*it, "max_points", c.edcp.max_points);
    }
    if (auto it = j.find("fusion"); it != j.end()) {
      reject_unknown(*it,
                     {"widths", "samples", "delta", "lr", "epochs", "batch_size", "momentum",
                      "fd_step", "init_rotation_deg", "init_translation"},
                     "fusion.");
      get(*it, "widths", c.fusion.widths);
      get(*it, "samples", c.fusion.samples);
      get(*it, "delta", c.fusion.train.delta);
      get(*it, "lr", c.fusion.train.lr);
      get(*it, "epochs", c.fusion.train.epochs);
      get(*it, "batch_size", c.fusion.train.batch_size);
      get(*it, "momentum", c.fusion.train.momentum);
      get(*it, "fd_step", c.fusion.train.fd_step);
      get(*it, "init_rotation_deg", c.fusion.init_rotation_deg);
      get(*it, "init_translation", c.fusion.init_translation);
    }
    if (auto it = j.find("mdr"); it != j.end()) read_mdr(*it, c.mdr);
    if (auto it = j.find("bench"); it != j.end()) {
      reject_unknown(*it,
                     {"rotations_deg", "translations_mm", "noise_mm", "pairs_per_cell",
                      "n_points", "methods"},
                     "bench.");
      get(*it, "rotations_deg", c.bench.rotations_deg);
      get(*it, "translations_mm", c.bench.translations_mm);
      get(*it, "noise_mm", c.bench.noise_mm);
      get(*it, "pairs_per_cell", c.bench.pairs_per_cell);
      get(*it, "n_points", c.bench.n_points);
      if (it->contains("methods")) {
        c.bench.methods.clear();
        for (const auto& m : it->at("methods")) {
          c.bench.methods.push_back(method_from_string(m.get<std::string>()));
        }
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::MissingFile, "config not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

std::string config_to_json(const RunConfig& c) {
  std::vector<std::string> methods;
  for (Method m : c.bench.methods) methods.emplace_back(to_string(m));
  const auto& s = c.gen.spec;
  json gen{{"pairs", c.gen.pairs},
           {"train_fraction", c.gen.train_fraction},
           {"n_points", s.n_points},
           {"rotation_range_deg", s.rotation_range_deg},
           {"translation_range_mm", s.translation_range_mm},
           {"translation_norm_mm", s.translation_norm_mm ? json(*s.translation_norm_mm) : json()},
           {"scale_range", s.scale_range},
           {"overlap_ratio", s.overlap_ratio},
           {"noise_sigma_mm", s.noise_sigma_mm},
           {"erase", {{"count", s.erase.count}, {"radius", s.erase.radius}}}};
  const auto& m = c.edcp.model;
  json ed{{"k_neighbors", m.k_neighbors},
          {"widths", m.widths},
          {"d", m.d},
          {"variant", std::string(edcp::to_string(m.variant))},
          {"blocks", m.blocks},
          {"heads", m.heads},
          {"slope", m.slope},
          {"lr", c.edcp.train.lr},
          {"epochs", c.edcp.train.epochs},
          {"batch_size", c.edcp.train.batch_size},
          {"momentum", c.edcp.train.momentum},
          {"max_points", c.edcp.max_points}};
  const auto& f = c.fusion;
  json fu{{"widths", f.widths},
          {"samples", f.samples},
          {"delta", f.train.delta},
          {"lr", f.train.lr},
          {"epochs", f.train.epochs},
          {"batch_size", f.train.batch_size},
          {"momentum", f.train.momentum},
          {"fd_step", f.train.fd_step},
          {"init_rotation_deg", f.init_rotation_deg},
          {"init_translation", f.init_translation}};
  const auto& d = c.mdr;
  json mdr{{"pyramid", {{"levels", d.pyramid.levels}, {"fractions", d.pyramid.fractions}}},
           {"icp",
            {{"max_iterations", d.icp.max_iterations},
             {"rejection_factor", d.icp.rejection_factor},
             {"rejection_distance",
              d.icp.rejection_distance ? json(*d.icp.rejection_distance) : json()},
             {"twist_tol", d.icp.twist_tol},
             {"rmse_tol", d.icp.rmse_tol}}},
           {"ndt",
            {{"max_iterations", d.ndt.max_iterations},
             {"lambda0", d.ndt.lambda0},
             {"backoff", d.ndt.backoff},
             {"max_backoffs", d.ndt.max_backoffs},
             {"twist_tol", d.ndt.twist_tol},
             {"score_tol", d.ndt.score_tol},
             {"cost_cap", d.ndt.cost_cap}}},
           {"eps",
            {{"s0", d.eps.s0},
             {"shrink", d.eps.shrink},
             {"min_step", d.eps.min_step},
             {"max_iterations", d.eps.max_iterations},
             {"subsample", d.eps.subsample},
             {"truncation_factor", d.eps.truncation_factor}}}};
  json bench{{"rotations_deg", c.bench.rotations_deg},
             {"translations_mm", c.bench.translations_mm},
             {"noise_mm", c.bench.noise_mm},
             {"pairs_per_cell", c.bench.pairs_per_cell},
             {"n_points", c.bench.n_points},
             {"methods", methods}};
  json j{{"dataset_dir", c.dataset_dir.string()},
         {"checkpoint_dir", c.checkpoint_dir.string()},
         {"output_dir", c.output_dir.string()},
         {"method", std::string(to_string(c.method))},
         {"seed", c.seed},
         {"frame", std::string(to_string(c.frame))},
         {"budget_s", c.budget_s},
         {"threads", c.threads},
         {"edcp_points", c.edcp_points},
         {"gen", gen},
         {"edcp", ed},
         {"fusion", fu},
         {"mdr", mdr},
         {"bench", bench}};
  return j.dump(2) + "\n";
}

// ---- data ----

PointCloud source_cloud(std::uint64_t seed, std::size_t n_points) {
  const synth::ShapeSpec part = synth::random_part(seed);
  return synth::normalize_unit_sphere(synth::sample_surface(part, n_points, seed)).cloud;
}

io::DatasetManifest cmd_gen_data(const RunConfig& cfg) {
  cfg.validate();
  const std::filesystem::path dir = cfg.dataset_dir;
  std::filesystem::create_directories(dir / "clouds");
  const std::size_t n = cfg.gen.pairs;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 split_rng(synth::mix_seed(cfg.seed, 0x5e17));
  std::shuffle(order.begin(), order.end(), split_rng);
  const auto n_train = static_cast<std::size_t>(
      std::llround(cfg.gen.train_fraction * static_cast<double>(n)));
  std::vector<std::string> split(n, "test");
  for (std::size_t k = 0; k < n_train; ++k) split[order[k]] = "train";

  io::DatasetManifest manifest;
  manifest.pairs.resize(n);
  parallel_for(n, thread_count(cfg), [&](std::size_t i) {
    const std::uint64_t seed = synth::mix_seed(cfg.seed, i);
    synth::PairSpec spec = cfg.gen.spec;
    spec.seed = synth::mix_seed(seed, 1);
    const synth::RegistrationPair pr = synth::make_pair(source_cloud(seed, spec.n_points), spec);
    char stem[32];
    std::snprintf(stem, sizeof stem, "pair_%04zu", i);
    io::PairRecord& r = manifest.pairs[i];
    r.x_path = std::string("clouds/") + stem + "_x.ply";
    r.y_path = std::string("clouds/") + stem + "_y.ply";
    io::write_cloud(dir / r.x_path, pr.x);
    io::write_cloud(dir / r.y_path, pr.y);
    r.transform = pr.truth;
    r.unit = pr.x.unit();
    r.seed = seed;
    r.split = split[i];
    r.mm_per_unit = pr.x.mm_per_unit();
  });
  io::write_manifest(cfg.manifest_path(), manifest);
  return manifest;
}

std::pair<PointCloud, PointCloud> reduce_pair(const PointCloud& x, const PointCloud& y,
                                              std::size_t max_points) {
  if (!x.has_provenance() || !y.has_provenance()) {
    fail(ErrorCode::InvalidArgument, "reduce_pair needs provenance on both clouds");
  }
  if (x.size() <= max_points) return {x, y};
  // Surface samples are i.i.d., so a prefix of provenance ids is a uniform
  // subsample of the surface; the bound is the max_points-th smallest id.
  std::vector<std::int64_t> ids = x.provenance();
  std::nth_element(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(max_points - 1),
                   ids.end());
  const std::int64_t bound = ids[max_points - 1];
  auto keep = [bound](const PointCloud& c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < c.size(); ++i)
      if (c.provenance()[i] <= bound) idx.push_back(i);
    return c.select(idx);
  };
  return {keep(x), keep(y)};
}

namespace {

struct LoadedPair {
  PointCloud x, y;
};

LoadedPair load_pair(const RunConfig& cfg, const io::PairRecord& r) {
  return {io::read_cloud(io::resolve(cfg.manifest_path(), r.x_path)),
          io::read_cloud(io::resolve(cfg.manifest_path(), r.y_path))};
}

io::DatasetManifest manifest_for(const RunConfig& cfg) {
  if (!std::filesystem::exists(cfg.manifest_path())) {
    fail(ErrorCode::MissingFile, "no manifest at " + cfg.manifest_path().string() +
                                     " (run gen-data first)");
  }
  return io::read_manifest(cfg.manifest_path());
}

void write_loss_csv(const std::filesystem::path& path, const char* column,
                    const std::vector<double>& history) {
  std::string s = std::string("epoch,") + column + "\n";
  for (std::size_t e = 0; e < history.size(); ++e) {
    s += std::to_string(e) + "," + num(history[e]) + "\n";
  }
  write_text(path, s);
}

}  // namespace

TrainSummary cmd_train_edcp(const RunConfig& cfg) {
  cfg.validate();
  const io::DatasetManifest manifest = manifest_for(cfg);
  const auto train = manifest.split("train");
  if (train.empty()) fail(ErrorCode::EmptyDataset, "manifest has no train pairs");
  std::vector<std::optional<edcp::TrainPair>> slots(train.size());
  parallel_for(train.size(), thread_count(cfg), [&](std::size_t i) {
    LoadedPair lp = load_pair(cfg, *train[i]);
    auto [x, y] = reduce_pair(lp.x, lp.y, cfg.edcp.max_points);
    auto corr = edcp::correspondences_from_provenance(x, y);
    slots[i] = edcp::TrainPair{std::move(x), std::move(y), std::move(corr)};
  });
  std::vector<edcp::TrainPair> pairs;
  for (auto& s : slots) pairs.push_back(std::move(*s));
  edcp::EdcpModel model(cfg.edcp.model, synth::mix_seed(cfg.seed, 0xed01));
  edcp::TrainConfig tc = cfg.edcp.train;
  tc.seed = synth::mix_seed(cfg.seed, 0xed02);
  const edcp::TrainResult res = edcp::train_edcp(model, pairs, tc);
  std::filesystem::create_directories(cfg.checkpoint_dir);
  model.save(cfg.edcp_checkpoint());
  TrainSummary out{res.history, cfg.edcp_checkpoint(), cfg.output_dir / "edcp_loss.csv"};
  write_loss_csv(out.loss_csv, "mean_loss", res.history);
  return out;
}

std::vector<fusion::FusionSample> fusion_samples(const RunConfig& cfg,
                                                 const io::DatasetManifest& manifest) {
  const auto train = manifest.split("train");
  if (train.empty()) fail(ErrorCode::EmptyDataset, "manifest has no train pairs");
  std::vector<std::optional<LoadedPair>> loaded(train.size());
  parallel_for(train.size(), thread_count(cfg),
               [&](std::size_t i) { loaded[i] = load_pair(cfg, *train[i]); });
  std::vector<LoadedPair> clouds;
  for (auto& l : loaded) clouds.push_back(std::move(*l));

  const std::size_t n = cfg.fusion.samples;
  std::vector<std::optional<fusion::FusionSample>> slots(n);
  parallel_for(n, thread_count(cfg), [&](std::size_t k) {
    const std::size_t i = k % train.size();
    const io::PairRecord& r = *train[i];
    std::mt19937_64 rng(synth::mix_seed(cfg.seed, 0xf500 + k));
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto direction = [&] {
      Vec3 v(g(rng), g(rng), g(rng));
      return Vec3(v / v.norm());
    };
    const Vec3 axis = direction();
    const double angle = u(rng) * cfg.fusion.init_rotation_deg * std::numbers::pi / 180.0;
    const Vec3 shift = direction() * (u(rng) * cfg.fusion.init_translation);
    const RigidTransform delta(so3_exp(angle * axis), shift);
    const RigidTransform init = compose(delta, r.transform);
    try {
      const fusion::ChannelOutputs ch =
          fusion::run_channels(clouds[i].x, clouds[i].y, init, cfg.mdr);
      slots[k] = fusion::FusionSample{ch.icp.transform,
                                      ch.ndt.transform,
                                      ch.rmse1,
                                      ch.rmse2,
                                      r.transform,
                                      fusion::strided_subsample(clouds[i].x, 1024),
                                      std::to_string(k)};
    } catch (const Error&) {
      // A channel that cannot run from this start yields no sample.
    }
  });
  std::vector<fusion::FusionSample> out;
  for (auto& s : slots)
    if (s) out.push_back(std::move(*s));
  return out;
}

TrainSummary cmd_train_fusion(const RunConfig& cfg) {
  cfg.validate();
  const io::DatasetManifest manifest = manifest_for(cfg);
  const std::vector<fusion::FusionSample> samples = fusion_samples(cfg, manifest);
  fusion::FusionMlp mlp(cfg.fusion.widths, synth::mix_seed(cfg.seed, 0xf001));
  const auto [shift, scale] = fusion::feature_statistics(samples);
  mlp.set_input_normalization(shift, scale);
  fusion::FusionTrainConfig tc = cfg.fusion.train;
  tc.seed = synth::mix_seed(cfg.seed, 0xf002);
  const fusion::FusionTrainResult res = fusion::train_fusion(mlp, samples, tc);
  std::filesystem::create_directories(cfg.checkpoint_dir);
  mlp.save(cfg.fusion_checkpoint());
  TrainSummary out{res.history, cfg.fusion_checkpoint(), cfg.output_dir / "fusion_loss.csv"};
  write_loss_csv(out.loss_csv, "mean_huber", res.history);
  return out;
}

// ---- registration ----

Models load_models(const RunConfig& cfg, std::span<const Method> methods) {
  Models m;
  const bool want_edcp = std::any_of(methods.begin(), methods.end(), needs_edcp);
  const bool want_fusion = std::any_of(methods.begin(), methods.end(), needs_fusion);
  if (want_edcp) m.edcp = edcp::EdcpModel::load(cfg.edcp_checkpoint());
  if (want_fusion) m.fusion = fusion::FusionMlp::load(cfg.fusion_checkpoint());
  return m;
}

Registration register_pair(Method method, const PointCloud& x, const PointCloud& y,
                           const Models& models, const RunConfig& cfg) {
  const auto t0 = Clock::now();
  Registration reg;
  const RigidTransform identity;
  msreg::PyramidConfig single = cfg.mdr.pyramid;
  single.levels = 1;

  auto multiscale_json = [](const msreg::MultiscaleResult& m) {
    json levels = json::array();
    for (const auto& l : m.levels) {
      levels.push_back({{"level", l.level},
                        {"points", l.points},
                        {"value", l.value},
                        {"iterations", l.iterations},
                        {"failed", l.failed}});
    }
    return levels;
  };
  auto coarse = [&]() {
    if (!models.edcp) fail(ErrorCode::MissingCheckpoint, "edcp model not loaded");
    const edcp::EdcpResult r = edcp::edcp_register(*models.edcp, strided(x, cfg.edcp_points),
                                                   strided(y, cfg.edcp_points));
    reg.coarse = r.transform;
    reg.confidence = r.confidence;
    check_budget(cfg, t0, "edcp stage");
    return r.transform;
  };
  auto fine = [&](const RigidTransform& init) {
    if (!models.fusion) fail(ErrorCode::MissingCheckpoint, "fusion model not loaded");
    const fusion::MdrResult r = fusion::mdr_register(x, y, init, *models.fusion, cfg.mdr);
    reg.diagnostics = r.diagnostics_json();
    return r.transform;
  };

  switch (method) {
    case Method::Icp:
    case Method::MsIcp: {
      const auto r = msreg::multiscale_icp(x, y, method == Method::Icp ? single : cfg.mdr.pyramid,
                                           cfg.mdr.icp, identity);
      reg.transform = r.transform;
      reg.diagnostics = json{{"levels", multiscale_json(r)}}.dump();
      break;
    }
    case Method::Ndt:
    case Method::MsNdt: {
      const auto r = msreg::multiscale_ndt(x, y, method == Method::Ndt ? single : cfg.mdr.pyramid,
                                           cfg.mdr.ndt, identity);
      reg.transform = r.transform;
      reg.diagnostics = json{{"levels", multiscale_json(r)}}.dump();
      break;
    }
    case Method::Edcp:
      reg.transform = coarse();
      reg.diagnostics = json{{"confidence", *reg.confidence}}.dump();
      break;
    case Method::Mdr:
      reg.transform = fine(identity);
      break;
    case Method::Medpnet: {
      const RigidTransform init = coarse();
      reg.transform = fine(init);
      json d = json::parse(reg.diagnostics);
      d["coarse"] = transform_json(init);
      d["confidence"] = *reg.confidence;
      reg.diagnostics = d.dump();
      break;
    }
  }
  reg.seconds = seconds_since(t0);
  check_budget(cfg, t0, "registration");
  return reg;
}

std::array<double, 12> transform_numbers(const RigidTransform& t) {
  std::array<double, 12> v{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) v[3 * r + c] = t.rotation()(r, c);
  for (int k = 0; k < 3; ++k) v[9 + k] = t.translation()[k];
  return v;
}

RigidTransform transform_from_numbers(std::span<const double> v) {
  if (v.size() != 12) {
    fail(ErrorCode::InvalidArgument, "transform needs 12 numbers, got " + std::to_string(v.size()));
  }
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < 3; ++c) r(i, c) = v[3 * i + c];
  return {r, Vec3(v[9], v[10], v[11])};
}

RigidTransform read_transform(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::MissingFile, "no transform record at " + path.string());
  try {
    const json j = json::parse(in);
    const auto v = j.at("transform").get<std::vector<double>>();
    return transform_from_numbers(v);
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
}

namespace {

RegisterOutput register_and_record(const RunConfig& cfg, const PointCloud& x, const PointCloud& y,
                                   const std::optional<RigidTransform>& truth,
                                   const std::string& stem, bool export_aligned) {
  const Method m = cfg.method;
  const Models models = load_models(cfg, std::span<const Method>(&m, 1));
  RegisterOutput out;
  out.reg = register_pair(m, x, y, models, cfg);
  json rec{{"method", std::string(to_string(m))},
           {"transform", transform_json(out.reg.transform)},
           {"seconds", out.reg.seconds},
           {"budget_s", cfg.budget_s},
           {"diagnostics", json::parse(out.reg.diagnostics.empty() ? "{}" : out.reg.diagnostics)}};
  if (truth) {
    const RegistrationMetrics met =
        to_frame(evaluate(out.reg.transform, *truth, x.points(), out.reg.seconds), cfg.frame,
                 x.mm_per_unit());
    rec["frame"] = std::string(to_string(cfg.frame));
    rec["metrics"] = {{"mse_r", met.mse_r},     {"rmse_r", met.rmse_r}, {"mae_r", met.mae_r},
                      {"mse_t", met.mse_t},     {"rmse_t", met.rmse_t}, {"mae_t", met.mae_t},
                      {"point_rmse", met.point_rmse}};
  }
  out.record = cfg.output_dir / ("register_" + stem + ".json");
  write_text(out.record, rec.dump(2) + "\n");
  if (export_aligned) {
    out.aligned = cfg.output_dir / ("register_" + stem + "_aligned.ply");
    std::filesystem::create_directories(cfg.output_dir);
    io::write_cloud(*out.aligned, apply_transform(out.reg.transform, x));
  }
  return out;
}

const io::PairRecord& record_at(const io::DatasetManifest& m, std::size_t index) {
  if (index >= m.pairs.size()) {
    fail(ErrorCode::IndexOutOfRange, "pair index " + std::to_string(index) + " but manifest has " +
                                         std::to_string(m.pairs.size()) + " pairs");
  }
  return m.pairs[index];
}

}  // namespace

RegisterOutput cmd_register(const RunConfig& cfg, std::size_t pair_index, bool export_aligned) {
  cfg.validate();
  const io::DatasetManifest manifest = manifest_for(cfg);
  const io::PairRecord& r = record_at(manifest, pair_index);
  const LoadedPair lp = load_pair(cfg, r);
  char stem[32];
  std::snprintf(stem, sizeof stem, "%04zu", pair_index);
  return register_and_record(cfg, lp.x, lp.y, r.transform, stem, export_aligned);
}

RegisterOutput cmd_register(const RunConfig& cfg, const std::filesystem::path& x_path,
                            const std::filesystem::path& y_path, bool export_aligned) {
  cfg.validate();
  const PointCloud x = io::read_cloud(x_path);
  const PointCloud y = io::read_cloud(y_path);
  return register_and_record(cfg, x, y, std::nullopt, x_path.stem().string(), export_aligned);
}

ExportPaths cmd_export(const RunConfig& cfg, const PointCloud& source, const PointCloud& target,
                       const RigidTransform& transform, const std::string& stem) {
  std::filesystem::create_directories(cfg.output_dir);
  ExportPaths p{cfg.output_dir / (stem + "_source.ply"), cfg.output_dir / (stem + "_target.ply"),
                cfg.output_dir / (stem + "_aligned.ply")};
  io::write_cloud(p.source, source);
  io::write_cloud(p.target, target);
  io::write_cloud(p.aligned, apply_transform(transform, source));
  return p;
}

ExportPaths cmd_export(const RunConfig& cfg, std::size_t pair_index,
                       const RigidTransform& transform) {
  const io::DatasetManifest manifest = manifest_for(cfg);
  const LoadedPair lp = load_pair(cfg, record_at(manifest, pair_index));
  char stem[32];
  std::snprintf(stem, sizeof stem, "pair_%04zu", pair_index);
  return cmd_export(cfg, lp.x, lp.y, transform, stem);
}

// ---- benchmark ----

RegistrationMetrics to_frame(const RegistrationMetrics& m, MetricFrame frame,
                             double mm_per_unit) {
  if (frame == MetricFrame::Normalized) return m;
  RegistrationMetrics out = m;
  out.mse_t = m.mse_t * mm_per_unit * mm_per_unit;
  out.rmse_t = m.rmse_t * mm_per_unit;
  out.mae_t = m.mae_t * mm_per_unit;
  out.point_rmse = m.point_rmse * mm_per_unit;
  return out;
}

std::string cell_id(double rotation_deg, double translation_mm, double noise_mm) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "r%03.0f_t%04.0f_n%.1f", rotation_deg, translation_mm, noise_mm);
  return buf;
}

synth::RegistrationPair bench_pair(std::uint64_t source_seed, std::size_t n_points,
                                   double rotation_deg, double translation_mm, double noise_mm,
                                   std::uint64_t pair_seed) {
  synth::PairSpec spec;
  spec.seed = pair_seed;
  spec.n_points = n_points;
  spec.rotation_range_deg = {rotation_deg, rotation_deg};
  spec.translation_norm_mm = translation_mm;
  spec.noise_sigma_mm = noise_mm;
  return synth::make_pair(source_cloud(source_seed, n_points), spec);
}

std::vector<BenchAggregate> aggregate(std::span<const BenchRow> rows) {
  std::map<std::pair<std::string, int>, BenchAggregate> acc;
  std::vector<std::pair<std::string, int>> order;
  auto add = [&](const std::string& cell, const BenchRow& r) {
    const auto key = std::make_pair(cell, static_cast<int>(r.method));
    auto [it, fresh] = acc.try_emplace(key);
    if (fresh) {
      order.push_back(key);
      it->second.cell = cell;
      it->second.method = r.method;
    }
    BenchAggregate& a = it->second;
    ++a.rows;
    if (!r.ok()) {
      ++a.failed;
      return;
    }
    const auto& m = r.metrics;
    a.mse_r += m.mse_r;
    a.rmse_r += m.rmse_r;
    a.mae_r += m.mae_r;
    a.mse_t += m.mse_t;
    a.rmse_t += m.rmse_t;
    a.mae_t += m.mae_t;
    a.point_rmse += m.point_rmse;
    a.seconds += m.elapsed_seconds;
  };
  for (const auto& r : rows) add(r.cell, r);
  for (const auto& r : rows) add("all", r);
  std::vector<BenchAggregate> out;
  for (const auto& key : order) {
    BenchAggregate a = acc.at(key);
    const std::size_t ok = a.rows - a.failed;
    const double inv = ok > 0 ? 1.0 / static_cast<double>(ok) : std::nan("");
    for (double* v : {&a.mse_r, &a.rmse_r, &a.mae_r, &a.mse_t, &a.rmse_t, &a.mae_t,
                      &a.point_rmse, &a.seconds}) {
      *v *= inv;
    }
    out.push_back(a);
  }
  return out;
}

void BenchReport::write_csv(const std::filesystem::path& path) const {
  std::string s =
      "pair_id,method,frame,mse_r,rmse_r,mae_r,mse_t,rmse_t,mae_t,point_rmse,seconds,status\n";
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    s += r.pair_id + "," + std::string(to_string(r.method)) + "," +
         std::string(to_string(r.frame));
    for (double v : {m.mse_r, m.rmse_r, m.mae_r, m.mse_t, m.rmse_t, m.mae_t, m.point_rmse}) {
      s += "," + (r.ok() ? num(v) : std::string("nan"));
    }
    s += "," + format("%.6f", m.elapsed_seconds) + "," + r.status + "\n";
  }
  write_text(path, s);
}

void BenchReport::write_aggregates_csv(const std::filesystem::path& path) const {
  std::string s =
      "cell,method,rows,failed,mse_r,rmse_r,mae_r,mse_t,rmse_t,mae_t,point_rmse,seconds\n";
  for (const auto& a : aggregates) {
    s += a.cell + "," + std::string(to_string(a.method)) + "," + std::to_string(a.rows) + "," +
         std::to_string(a.failed);
    for (double v : {a.mse_r, a.rmse_r, a.mae_r, a.mse_t, a.rmse_t, a.mae_t, a.point_rmse}) {
      s += "," + num(v);
    }
    s += "," + format("%.6f", a.seconds) + "\n";
  }
  write_text(path, s);
}

std::string BenchReport::summary_json() const {
  json cells = json::array();
  for (const auto& a : aggregates) {
    auto val = [](double v) { return std::isnan(v) ? json() : json(v); };
    cells.push_back({{"cell", a.cell},
                     {"method", std::string(to_string(a.method))},
                     {"rows", a.rows},
                     {"failed", a.failed},
                     {"mse_r", val(a.mse_r)},
                     {"rmse_r", val(a.rmse_r)},
                     {"mae_r", val(a.mae_r)},
                     {"mse_t", val(a.mse_t)},
                     {"rmse_t", val(a.rmse_t)},
                     {"mae_t", val(a.mae_t)},
                     {"point_rmse", val(a.point_rmse)}});
  }
  json failed = json::array();
  for (const auto& r : rows) {
    if (!r.ok()) {
      failed.push_back({{"pair_id", r.pair_id},
                        {"method", std::string(to_string(r.method))},
                        {"status", r.status}});
    }
  }
  return json{{"rows", rows.size()}, {"aggregates", cells}, {"failed", failed}}.dump(2) + "\n";
}

BenchReport cmd_bench(const RunConfig& cfg) {
  cfg.validate();
  const io::DatasetManifest manifest = manifest_for(cfg);
  auto sources = manifest.split("test");
  if (sources.empty()) sources = manifest.split("train");
  if (sources.empty()) fail(ErrorCode::EmptyDataset, "manifest has no pairs");
  const Models models = load_models(cfg, cfg.bench.methods);
  const auto& b = cfg.bench;

  struct Job {
    std::string cell, pair_id;
    double rot, trans, noise;
    std::uint64_t source_seed, pair_seed;
  };
  std::vector<Job> jobs;
  std::uint64_t counter = 0;
  for (double rot : b.rotations_deg) {
    for (double trans : b.translations_mm) {
      for (double noise : b.noise_mm) {
        const std::string cell = cell_id(rot, trans, noise);
        for (std::size_t j = 0; j < b.pairs_per_cell; ++j) {
          char pid[16];
          std::snprintf(pid, sizeof pid, "_p%02zu", j);
          // Every cell reuses the same source clouds; only the perturbation differs.
          jobs.push_back({cell, cell + pid, rot, trans, noise, sources[j % sources.size()]->seed,
                          synth::mix_seed(cfg.seed, 0xbe00 + counter++)});
        }
      }
    }
  }
  const std::size_t m = b.methods.size();
  std::vector<std::optional<synth::RegistrationPair>> pairs(jobs.size());
  std::vector<std::string> pair_errors(jobs.size());
  parallel_for(jobs.size(), thread_count(cfg), [&](std::size_t i) {
    const Job& jb = jobs[i];
    try {
      pairs[i] = bench_pair(jb.source_seed, b.n_points, jb.rot, jb.trans, jb.noise, jb.pair_seed);
    } catch (const Error& e) {
      pair_errors[i] = e.what();
    }
  });

  BenchReport report;
  report.rows.resize(jobs.size() * m);
  parallel_for(report.rows.size(), thread_count(cfg), [&](std::size_t k) {
    const std::size_t i = k / m;
    const Job& jb = jobs[i];
    BenchRow& row = report.rows[k];
    row.cell = jb.cell;
    row.pair_id = jb.pair_id;
    row.method = b.methods[k % m];
    row.frame = cfg.frame;
    if (!pairs[i]) {
      row.status = "failed: " + pair_errors[i];
      return;
    }
    const synth::RegistrationPair& pr = *pairs[i];
    try {
      const Registration reg = register_pair(row.method, pr.x, pr.y, models, cfg);
      row.metrics = to_frame(evaluate(reg.transform, pr.truth, pr.x.points(), reg.seconds),
                             cfg.frame, pr.x.mm_per_unit());
    } catch (const Error& e) {
      row.status = e.code() == ErrorCode::TimeBudgetExceeded ? "over_budget"
                                                             : "failed: " + std::string(e.what());
    } catch (const std::exception& e) {
      row.status = "failed: " + std::string(e.what());
    }
    // Commas would split the CSV field.
    std::replace(row.status.begin(), row.status.end(), ',', ';');
  });
  report.aggregates = aggregate(report.rows);
  report.write_csv(cfg.output_dir / "bench.csv");
  report.write_aggregates_csv(cfg.output_dir / "bench_cells.csv");
  write_text(cfg.output_dir / "bench_summary.json", report.summary_json());
  return report;
}

}  // namespace castreg::pipeline
