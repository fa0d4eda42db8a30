#include "castreg/msreg.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <unordered_map>

namespace castreg::msreg {

void PyramidConfig::validate() const {
  if (levels < 1) fail(ErrorCode::InvalidArgument, "pyramid needs at least one level");
  if (fractions.size() < levels) {
    fail(ErrorCode::InvalidArgument, "pyramid has " + std::to_string(levels) + " levels but " +
                                         std::to_string(fractions.size()) + " voxel fractions");
  }
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    if (!(fractions[i] > 0.0)) fail(ErrorCode::InvalidArgument, "voxel fractions must be positive");
    if (i > 0 && !(fractions[i] < fractions[i - 1])) {
      fail(ErrorCode::InvalidArgument, "voxel fractions must strictly decrease");
    }
  }
}

double PyramidConfig::voxel(std::size_t level, double diagonal) const {
  const std::size_t first = fractions.size() - levels;
  return fractions.at(first + level) * diagonal;
}

void IcpConfig::validate() const {
  if (max_iterations < 1 || !(rejection_factor > 0.0) || !(twist_tol > 0.0) ||
      !(rmse_tol > 0.0) || (rejection_distance && !(*rejection_distance > 0.0))) {
    fail(ErrorCode::InvalidArgument, "ICP settings must be positive");
  }
}

void NdtConfig::validate() const {
  if (max_iterations < 1 || !(lambda0 > 0.0) || !(backoff > 1.0) || !(twist_tol > 0.0) ||
      !(score_tol > 0.0) || !(cost_cap > 0.0)) {
    fail(ErrorCode::InvalidArgument, "NDT settings must be positive");
  }
}

namespace {

struct KeyHash {
  std::size_t operator()(const CellKey& k) const noexcept {
    std::uint64_t h = 1469598103934665603ull;
    for (std::int64_t v : k) {
      h ^= static_cast<std::uint64_t>(v) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    }
    return static_cast<std::size_t>(h);
  }
};

CellKey key_of(const Vec3& p, double edge) {
  return {static_cast<std::int64_t>(std::floor(p.x() / edge)),
          static_cast<std::int64_t>(std::floor(p.y() / edge)),
          static_cast<std::int64_t>(std::floor(p.z() / edge))};
}

}  // namespace

PointCloud voxel_downsample(const PointCloud& cloud, double voxel) {
  if (!(voxel > 0.0)) fail(ErrorCode::InvalidArgument, "voxel size must be positive");
  std::unordered_map<CellKey, std::size_t, KeyHash> slot;
  std::vector<Vec3> sums;
  std::vector<std::size_t> counts;
  for (const auto& p : cloud.points()) {
    const auto [it, fresh] = slot.try_emplace(key_of(p, voxel), sums.size());
    if (fresh) {
      sums.push_back(Vec3::Zero());
      counts.push_back(0);
    }
    sums[it->second] += p;
    ++counts[it->second];
  }
  for (std::size_t i = 0; i < sums.size(); ++i) sums[i] /= static_cast<double>(counts[i]);
  return {std::move(sums), cloud.unit(), {}, cloud.mm_per_unit()};
}

std::vector<PointCloud> build_pyramid(const PointCloud& cloud, const PyramidConfig& cfg) {
  return build_pyramid(cloud, cfg, cloud.bbox_diagonal());
}

std::vector<PointCloud> build_pyramid(const PointCloud& cloud, const PyramidConfig& cfg,
                                      double diagonal) {
  cfg.validate();
  std::vector<PointCloud> out;
  for (std::size_t l = 0; l + 1 < cfg.levels; ++l) {
    out.push_back(voxel_downsample(cloud, cfg.voxel(l, diagonal)));
  }
  out.push_back(cloud);
  return out;
}

// ---- ICP -----------------------------------------------------------------------

IcpResult icp(const PointCloud& x, const PointCloud& y, const RigidTransform& init,
              const IcpConfig& cfg) {
  cfg.validate();
  if (x.size() < 3 || y.size() < 3) {
    fail(ErrorCode::DegenerateConfiguration, "ICP needs at least 3 points per cloud");
  }
  const KdTree tree(y);
  const double tau = cfg.rejection_distance ? *cfg.rejection_distance
                                            : cfg.rejection_factor * median_spacing(tree);
  const double tau2 = tau * tau;

  std::vector<Vec3> src, dst;
  src.reserve(x.size());
  dst.reserve(x.size());
  // Fills src/dst with accepted pairs under t; returns the truncated mean
  // squared distance and the accepted-pair mean squared distance.
  auto match = [&](const RigidTransform& t, double& accepted_ms) {
    src.clear();
    dst.clear();
    double trunc = 0.0, acc = 0.0;
    for (const auto& p : x.points()) {
      const Neighbor nb = tree.nearest(t * p);
      const double d2 = nb.distance * nb.distance;
      if (d2 <= tau2) {
        src.push_back(p);
        dst.push_back(y[nb.index]);
        acc += d2;
      }
      trunc += std::min(d2, tau2);
    }
    accepted_ms = src.empty() ? 0.0 : acc / static_cast<double>(src.size());
    return trunc / static_cast<double>(x.size());
  };

  IcpResult res{init, 0.0, 0, 0, {}};
  double prev = INFINITY;
  for (std::size_t it = 1; it <= cfg.max_iterations; ++it) {
    double acc_ms = 0.0;
    const double trunc = std::sqrt(match(res.transform, acc_ms));
    if (src.size() < 3) {
      fail(ErrorCode::NoCorrespondences,
           std::to_string(src.size()) + " pairs within rejection distance " + std::to_string(tau));
    }
    res.trace.push_back(trunc);
    res.iterations = it;
    const std::vector<double> w(src.size(), 1.0);
    const RigidTransform next = kabsch(src, dst, w);
    const RigidTransform step = compose(next, invert(res.transform));
    const double move = (step.translation().norm() + rotation_angle(step.rotation()));
    res.transform = next;
    if (move < cfg.twist_tol || std::abs(prev - trunc) < cfg.rmse_tol) break;
    prev = trunc;
  }
  double acc_ms = 0.0;
  match(res.transform, acc_ms);
  if (src.empty()) fail(ErrorCode::NoCorrespondences, "no pairs at the final transform");
  res.rmse = std::sqrt(acc_ms);
  res.accepted = src.size();
  return res;
}

// ---- NDT -----------------------------------------------------------------------

NdtGrid::NdtGrid(double cell_size, std::map<CellKey, NdtCell> cells)
    : cell_size_(cell_size), cells_(std::move(cells)) {
  if (!(cell_size_ > 0.0)) fail(ErrorCode::InvalidArgument, "cell size must be positive");
}

CellKey NdtGrid::key(const Vec3& p) const { return key_of(p, cell_size_); }

const NdtCell* NdtGrid::find(const Vec3& p) const {
  const auto it = cells_.find(key(p));
  return it == cells_.end() ? nullptr : &it->second;
}

NdtGrid build_ndt_grid(const PointCloud& y, double cell_size) {
  if (!(cell_size > 0.0)) fail(ErrorCode::InvalidArgument, "cell size must be positive");
  std::map<CellKey, std::vector<Vec3>> groups;
  for (const auto& p : y.points()) groups[key_of(p, cell_size)].push_back(p);

  std::map<CellKey, NdtCell> cells;
  for (const auto& [k, pts] : groups) {
    if (pts.size() < 5) continue;
    NdtCell c;
    c.count = pts.size();
    for (const auto& p : pts) c.mean += p;
    c.mean /= static_cast<double>(pts.size());
    Mat3 cov = Mat3::Zero();
    for (const auto& p : pts) cov += (p - c.mean) * (p - c.mean).transpose();
    cov /= static_cast<double>(pts.size() - 1);

    Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
    Vec3 ev = es.eigenvalues();
    const double top = ev.maxCoeff();
    if (!(top > 1e-300)) {
      // All points coincide: isotropic spread of 1% of the cell.
      const double s = 0.01 * cell_size;
      c.cov = s * s * Mat3::Identity();
      c.inv = c.cov.inverse();
    } else if (ev.minCoeff() >= 0.01 * top) {
      c.cov = cov;
      c.inv = cov.inverse();
    } else {
      for (int i = 0; i < 3; ++i) ev[i] = std::max(ev[i], 0.01 * top);
      const Mat3& v = es.eigenvectors();
      c.cov = v * ev.asDiagonal() * v.transpose();
      c.inv = v * ev.cwiseInverse().asDiagonal() * v.transpose();
    }
    cells.emplace(k, c);
  }
  if (cells.empty()) {
    fail(ErrorCode::NoValidCells, "no cell of edge " + std::to_string(cell_size) +
                                      " holds 5 or more points");
  }
  return {cell_size, std::move(cells)};
}

RigidTransform perturb(const RigidTransform& t, const Vec6& delta) {
  return RigidTransform::projected(so3_exp(delta.tail<3>()) * t.rotation(),
                                   t.translation() + delta.head<3>());
}

NdtEvaluation evaluate_ndt(const PointCloud& x, const NdtGrid& grid, const RigidTransform& t,
                           const NdtConfig& cfg) {
  NdtEvaluation ev;
  Eigen::Matrix<double, 3, 6> j;
  j.leftCols<3>() = Mat3::Identity();
  for (const auto& p : x.points()) {
    const Vec3 rp = t.rotation() * p;
    const Vec3 q = rp + t.translation();
    const NdtCell* cell = grid.find(q);
    if (!cell) {
      ev.score += cfg.cost_cap;
      continue;
    }
    ++ev.inside;
    const Vec3 d = q - cell->mean;
    const Vec3 sd = cell->inv * d;
    const double cost = 0.5 * d.dot(sd);
    if (cost >= cfg.cost_cap) {
      ev.score += cfg.cost_cap;
      continue;
    }
    ev.score += cost;
    j.rightCols<3>() = -skew(rp);
    ev.gradient += j.transpose() * sd;
    ev.hessian += j.transpose() * cell->inv * j;
  }
  return ev;
}

NdtResult ndt(const PointCloud& x, const NdtGrid& grid, const RigidTransform& init,
              const NdtConfig& cfg) {
  cfg.validate();
  NdtEvaluation ev = evaluate_ndt(x, grid, init, cfg);
  if (ev.inside == 0) {
    fail(ErrorCode::AllPointsOutsideGrid, "no transformed point falls in a valid cell");
  }
  NdtResult res{init, ev.score, 0, {ev.score}};
  double lambda = cfg.lambda0;
  using Mat6 = Eigen::Matrix<double, 6, 6>;
  for (std::size_t it = 1; it <= cfg.max_iterations; ++it) {
    res.iterations = it;
    if (ev.gradient.norm() < 1e-12) break;
    bool accepted = false;
    Vec6 delta = Vec6::Zero();
    NdtEvaluation next;
    RigidTransform cand;
    for (std::size_t b = 0; b <= cfg.max_backoffs; ++b) {
      Mat6 a = ev.hessian;
      a.diagonal() += lambda * (ev.hessian.diagonal().array() + 1e-12).matrix();
      delta = -a.ldlt().solve(ev.gradient);
      if (delta.allFinite()) {
        cand = perturb(res.transform, delta);
        next = evaluate_ndt(x, grid, cand, cfg);
        if (next.score <= ev.score) {
          accepted = true;
          break;
        }
      }
      lambda *= cfg.backoff;
    }
    if (!accepted) break;
    lambda = std::max(cfg.lambda0, lambda / cfg.backoff);
    const double gain = ev.score - next.score;
    res.transform = cand;
    ev = next;
    res.trace.push_back(ev.score);
    if (delta.norm() < cfg.twist_tol || gain < cfg.score_tol * std::max(1.0, ev.score)) break;
  }
  res.score = ev.score;
  return res;
}

// ---- multiscale ------------------------------------------------------------------

bool MultiscaleResult::any_failed() const {
  for (const auto& l : levels)
    if (l.failed) return true;
  return false;
}

void MultiscaleResult::write_trace_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out << "level,iteration,value\n";
  char buf[64];
  for (const auto& l : levels) {
    for (std::size_t i = 0; i < l.trace.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g\n", l.level, i, l.trace[i]);
      out << buf;
    }
  }
}

MultiscaleResult multiscale_icp(const PointCloud& x, const PointCloud& y,
                                const PyramidConfig& pyramid, const IcpConfig& cfg,
                                const RigidTransform& init) {
  const double diag = y.bbox_diagonal();
  const auto px = build_pyramid(x, pyramid, diag);
  const auto py = build_pyramid(y, pyramid, diag);
  MultiscaleResult res{init, {}};
  for (std::size_t l = 0; l < pyramid.levels; ++l) {
    LevelRecord rec;
    rec.level = l;
    rec.voxel = pyramid.voxel(l, diag);
    rec.points = px[l].size();
    try {
      IcpResult r = icp(px[l], py[l], res.transform, cfg);
      res.transform = r.transform;
      rec.value = r.rmse;
      rec.iterations = r.iterations;
      rec.trace = std::move(r.trace);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NoCorrespondences &&
          e.code() != ErrorCode::DegenerateConfiguration) {
        throw;
      }
      rec.failed = true;
      rec.error = e.what();
    }
    res.levels.push_back(std::move(rec));
  }
  return res;
}

MultiscaleResult multiscale_ndt(const PointCloud& x, const PointCloud& y,
                                const PyramidConfig& pyramid, const NdtConfig& cfg,
                                const RigidTransform& init) {
  const double diag = y.bbox_diagonal();
  const auto px = build_pyramid(x, pyramid, diag);
  MultiscaleResult res{init, {}};
  for (std::size_t l = 0; l < pyramid.levels; ++l) {
    LevelRecord rec;
    rec.level = l;
    rec.voxel = pyramid.voxel(l, diag);
    rec.points = px[l].size();
    try {
      // Cell statistics come from the full target; only the source is thinned.
      const NdtGrid grid = build_ndt_grid(y, ndt_cell_size(rec.voxel, l, pyramid.levels));
      NdtResult r = ndt(px[l], grid, res.transform, cfg);
      res.transform = r.transform;
      rec.value = r.score;
      rec.iterations = r.iterations;
      rec.trace = std::move(r.trace);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NoValidCells && e.code() != ErrorCode::AllPointsOutsideGrid) {
        throw;
      }
      rec.failed = true;
      rec.error = e.what();
    }
    res.levels.push_back(std::move(rec));
  }
  return res;
}

}  // namespace castreg::msreg
