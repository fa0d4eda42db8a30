#include "castreg/edcp.hpp"

#include <json.hpp>

#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "castreg/kdtree.hpp"
#include "castreg/synth.hpp"

namespace castreg::edcp {

using ad::Shape;
using ad::Tensor;
using ad::Var;
using nlohmann::json;

std::string_view to_string(AttentionVariant v) noexcept {
  return v == AttentionVariant::Efficient ? "efficient" : "dot_product";
}

AttentionVariant variant_from_string(std::string_view name) {
  if (name == "efficient") return AttentionVariant::Efficient;
  if (name == "dot_product") return AttentionVariant::DotProduct;
  fail(ErrorCode::InvalidArgument, "unknown attention variant '" + std::string(name) + "'");
}

void EdcpConfig::validate() const {
  if (k_neighbors < 2) fail(ErrorCode::InvalidArgument, "k_neighbors must be >= 2");
  if (widths.empty()) fail(ErrorCode::InvalidArgument, "need at least one edge-conv layer");
  for (std::size_t w : widths)
    if (w == 0) fail(ErrorCode::InvalidArgument, "edge-conv widths must be positive");
  if (d == 0 || heads == 0 || d % heads != 0) {
    fail(ErrorCode::InvalidArgument, "embedding dim " + std::to_string(d) +
                                         " is not divisible by " + std::to_string(heads) +
                                         " heads");
  }
  if (!(slope >= 0.0 && slope < 1.0)) fail(ErrorCode::InvalidArgument, "slope must be in [0, 1)");
}

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) fail(ErrorCode::InvalidArgument, "lr must be nonnegative");
  if (epochs < 1) fail(ErrorCode::InvalidArgument, "epochs must be >= 1");
  if (batch_size < 1) fail(ErrorCode::InvalidArgument, "batch size must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    fail(ErrorCode::InvalidArgument, "momentum must be in [0, 1)");
  }
}

NeighborTable knn_graph(const PointCloud& cloud, std::size_t k) {
  const std::size_t n = cloud.size();
  if (k >= n) {
    fail(ErrorCode::TooFewPoints, "k = " + std::to_string(k) + " needs more than " +
                                      std::to_string(n) + " points");
  }
  if (k == 0) fail(ErrorCode::InvalidArgument, "k must be positive");
  const KdTree tree(cloud);
  NeighborTable table{n, k, std::vector<std::size_t>(n * k)};
  for (std::size_t i = 0; i < n; ++i) {
    const auto found = tree.k_nearest(cloud[i], k + 1);
    std::size_t out = 0;
    for (const Neighbor& nb : found) {
      if (nb.index == i || out == k) continue;
      table.index[i * k + out++] = nb.index;
    }
  }
  return table;
}

Tensor edge_features(const Tensor& x, const NeighborTable& nbr) {
  if (x.rank() != 2 || x.dim(0) != nbr.rows) {
    ad::shape_mismatch("edge_features", x.shape(), {nbr.rows, nbr.k});
  }
  const std::size_t n = x.dim(0), c = x.dim(1), k = nbr.k;
  Tensor out({n, k, 2 * c});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t r = nbr.index[i * k + j];
      if (r >= n) fail(ErrorCode::IndexOutOfRange, "neighbor index " + std::to_string(r));
      for (std::size_t q = 0; q < c; ++q) {
        out.at(i, j, q) = x.at(i, q);
        out.at(i, j, c + q) = x.at(r, q) - x.at(i, q);
      }
    }
  }
  return out;
}

Var edge_features(const Var& x, const NeighborTable& nbr) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.dim(0) != nbr.rows) {
    ad::shape_mismatch("edge_features", xv.shape(), {nbr.rows, nbr.k});
  }
  const std::size_t n = xv.dim(0), c = xv.dim(1), k = nbr.k;
  std::vector<std::size_t> self(n * k);
  for (std::size_t i = 0; i < n; ++i) std::fill_n(self.begin() + i * k, k, i);
  const Var xi = ad::gather_rows(x, self);
  const Var xj = ad::gather_rows(x, nbr.index);
  return ad::reshape(ad::concat({xi, ad::sub(xj, xi)}, 1), {n, k, 2 * c});
}

// ---- model -----------------------------------------------------------------

namespace {

Tensor glorot(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Tensor t({fan_in, fan_out});
  for (double& v : t.values()) v = u(rng);
  return t;
}

std::string name(const char* prefix, std::size_t i, const char* field) {
  return std::string(prefix) + std::to_string(i) + "." + field;
}

json config_json(const EdcpConfig& c) {
  return {{"k_neighbors", c.k_neighbors}, {"widths", c.widths},   {"d", c.d},
          {"variant", std::string(to_string(c.variant))},
          {"blocks", c.blocks},           {"heads", c.heads},     {"slope", c.slope}};
}

EdcpConfig config_from_json(const json& j) {
  EdcpConfig c;
  c.k_neighbors = j.at("k_neighbors").get<std::size_t>();
  c.widths = j.at("widths").get<std::vector<std::size_t>>();
  c.d = j.at("d").get<std::size_t>();
  c.variant = variant_from_string(j.at("variant").get<std::string>());
  c.blocks = j.at("blocks").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.slope = j.at("slope").get<double>();
  return c;
}

}  // namespace

EdcpModel::EdcpModel(EdcpConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(synth::mix_seed(seed, 0xedc9));
  std::size_t c_in = 3, total = 0;
  for (std::size_t l = 0; l < config_.widths.size(); ++l) {
    const std::size_t w = config_.widths[l];
    params_.add(name("edge", l, "w"), glorot(2 * c_in, w, rng));
    params_.add(name("edge", l, "b"), Tensor({w}));
    c_in = w;
    total += w;
  }
  const std::size_t d = config_.d;
  params_.add("proj.w", glorot(total, d, rng));
  params_.add("proj.b", Tensor({d}));
  for (std::size_t s = 0; s < config_.blocks; ++s) {
    for (const char* m : {"wq", "wk", "wv", "wo"}) params_.add(name("block", s, m), glorot(d, d, rng));
    params_.add(name("block", s, "ln.g"), Tensor({d}, 1.0));
    params_.add(name("block", s, "ln.b"), Tensor({d}));
    params_.add(name("block", s, "ff1.w"), glorot(d, d, rng));
    params_.add(name("block", s, "ff1.b"), Tensor({d}));
    params_.add(name("block", s, "ff2.w"), glorot(d, d, rng));
    params_.add(name("block", s, "ff2.b"), Tensor({d}));
  }
}

void EdcpModel::save(const std::filesystem::path& path) const {
  params_.save(path);
  std::ofstream out(path.string() + ".json", std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string() + ".json");
  out << config_json(config_).dump(2) << '\n';
}

EdcpModel EdcpModel::load(const std::filesystem::path& path) {
  const std::filesystem::path meta = path.string() + ".json";
  if (!std::filesystem::exists(meta) || !std::filesystem::exists(path)) {
    fail(ErrorCode::MissingCheckpoint, "no model checkpoint at " + path.string());
  }
  std::ifstream in(meta);
  EdcpConfig cfg;
  try {
    cfg = config_from_json(json::parse(in));
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, meta.string() + ": " + e.what());
  }
  EdcpModel model(cfg);
  model.params_.load(path);
  return model;
}

namespace {

// Permutation-invariant mean: each coordinate summed in sorted order.
Vec3 ordered_centroid(const PointCloud& cloud) {
  Vec3 c;
  std::vector<double> vals(cloud.size());
  for (int a = 0; a < 3; ++a) {
    for (std::size_t i = 0; i < cloud.size(); ++i) vals[i] = cloud[i][a];
    std::sort(vals.begin(), vals.end());
    double s = 0.0;
    for (double v : vals) s += v;
    c[a] = s / static_cast<double>(vals.size());
  }
  return c;
}

double radius_about(const PointCloud& cloud, const Vec3& c) {
  double r = 0.0;
  for (const auto& p : cloud.points()) r = std::max(r, (p - c).norm());
  return r > 0.0 ? r : 1.0;
}

Tensor scaled_points(const PointCloud& cloud, const Vec3& c, double scale) {
  Tensor t({cloud.size(), 3});
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (int a = 0; a < 3; ++a) t.at(i, a) = (cloud[i][a] - c[a]) / scale;
  return t;
}

// Network inputs for a pair: each cloud centered on its own centroid, both
// divided by the radius of X so the network is unit-agnostic.
std::pair<Tensor, Tensor> network_inputs(const PointCloud& x, const PointCloud& y) {
  const Vec3 cx = ordered_centroid(x);
  const Vec3 cy = ordered_centroid(y);
  const double s = radius_about(x, cx);
  return {scaled_points(x, cx, s), scaled_points(y, cy, s)};
}

}  // namespace

Tensor centered_points(const PointCloud& cloud) {
  const Vec3 c = ordered_centroid(cloud);
  return scaled_points(cloud, c, radius_about(cloud, c));
}

Var edge_conv_reference(const Var& x, const Var& weight, const Var& bias,
                        const NeighborTable& nbr, double slope) {
  const std::size_t n = nbr.rows, k = nbr.k;
  const std::size_t c = x.value().dim(1);
  const std::size_t out = weight.value().dim(1);
  const Var e = ad::reshape(edge_features(x, nbr), {n * k, 2 * c});
  const Var h = ad::leaky_relu(ad::add_bias(ad::matmul(e, weight), bias), slope);
  return ad::reduce_max(ad::reshape(h, {n, k, out}), 1);
}

Var edge_conv(const Var& x, const Var& weight, const Var& bias, const NeighborTable& nbr,
              double slope) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  if (xv.rank() != 2 || wv.rank() != 2 || wv.dim(0) != 2 * xv.dim(1)) {
    ad::shape_mismatch("edge_conv", xv.shape(), wv.shape());
  }
  if (xv.dim(0) != nbr.rows) ad::shape_mismatch("edge_conv", xv.shape(), {nbr.rows, nbr.k});
  const std::size_t c = xv.dim(1);
  // [x_i, x_j - x_i] W = x_i (W_c - W_n) + x_j W_n
  const Var wc = ad::slice(weight, 0, 0, c);
  const Var wn = ad::slice(weight, 0, c, 2 * c);
  const Var center = ad::matmul(x, ad::sub(wc, wn));
  const Var neighbor = ad::matmul(x, wn);
  return ad::edge_conv_max(center, neighbor, bias, nbr.index, nbr.k, slope);
}

Var dgcnn_embed(const Weights& w, const EdcpConfig& cfg, const Tensor& points,
                const NeighborTable& nbr) {
  Var x = w.tape.constant(points);
  std::vector<Var> layers;
  for (std::size_t l = 0; l < cfg.widths.size(); ++l) {
    x = edge_conv(x, w(name("edge", l, "w")), w(name("edge", l, "b")), nbr, cfg.slope);
    layers.push_back(x);
  }
  const Var cat = layers.size() == 1 ? layers[0] : ad::concat(layers, 1);
  return ad::add_bias(ad::matmul(cat, w("proj.w")), w("proj.b"));
}

Tensor dgcnn_embed(const EdcpModel& model, const PointCloud& cloud) {
  ad::Tape tape;
  const Weights w{tape, model.params(), false};
  const NeighborTable nbr = knn_graph(cloud, model.config().k_neighbors);
  return dgcnn_embed(w, model.config(), centered_points(cloud), nbr).value();
}

// ---- attention ---------------------------------------------------------------

namespace {

void check_qkv(const char* op, const Shape& q, const Shape& k, const Shape& v) {
  if (q.size() != 2 || k.size() != 2 || v.size() != 2) ad::shape_mismatch(op, q, k);
  if (q[1] != k[1]) ad::shape_mismatch(op, q, k);
  if (k[0] != v[0]) ad::shape_mismatch(op, k, v);
}

}  // namespace

Var dot_product_attention(const Var& q, const Var& k, const Var& v) {
  check_qkv("dot_product_attention", q.shape(), k.shape(), v.shape());
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.shape()[1]));
  const Var w = ad::softmax(ad::scale(ad::matmul(q, ad::transpose(k)), inv), 1);
  return ad::matmul(w, v);
}

Var efficient_attention(const Var& q, const Var& k, const Var& v) {
  check_qkv("efficient_attention", q.shape(), k.shape(), v.shape());
  const Var rq = ad::softmax(q, 1);
  const Var rk = ad::softmax(k, 0);
  const Var context = ad::matmul(ad::transpose(rk), v);  // d_k x d_v
  return ad::matmul(rq, context);
}

Tensor dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  check_qkv("dot_product_attention", q.shape(), k.shape(), v.shape());
  Tensor logits = ad::kernels::matmul_nt(q, k);
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
  for (double& x : logits.values()) x *= inv;
  return ad::kernels::matmul(ad::kernels::softmax(logits, 1), v);
}

Tensor efficient_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  check_qkv("efficient_attention", q.shape(), k.shape(), v.shape());
  const Tensor rq = ad::kernels::softmax(q, 1);
  const Tensor rk = ad::kernels::softmax(k, 0);
  return ad::kernels::matmul(rq, ad::kernels::matmul_tn(rk, v));
}

Var cross_block(const Weights& w, const EdcpConfig& cfg, std::size_t s, const Var& a,
                const Var& b) {
  const Var q = ad::matmul(a, w(name("block", s, "wq")));
  const Var k = ad::matmul(b, w(name("block", s, "wk")));
  const Var v = ad::matmul(b, w(name("block", s, "wv")));
  const std::size_t dh = cfg.d / cfg.heads;
  std::vector<Var> heads;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const Var qh = ad::slice(q, 1, h * dh, (h + 1) * dh);
    const Var kh = ad::slice(k, 1, h * dh, (h + 1) * dh);
    const Var vh = ad::slice(v, 1, h * dh, (h + 1) * dh);
    heads.push_back(cfg.variant == AttentionVariant::Efficient ? efficient_attention(qh, kh, vh)
                                                               : dot_product_attention(qh, kh, vh));
  }
  const Var cat = cfg.heads == 1 ? heads[0] : ad::concat(heads, 1);
  const Var attended = ad::matmul(cat, w(name("block", s, "wo")));
  const Var h = ad::layer_norm(ad::add(a, attended), 1, w(name("block", s, "ln.g")),
                               w(name("block", s, "ln.b")));
  const Var f1 = ad::leaky_relu(
      ad::add_bias(ad::matmul(h, w(name("block", s, "ff1.w"))), w(name("block", s, "ff1.b"))),
      cfg.slope);
  const Var f2 =
      ad::add_bias(ad::matmul(f1, w(name("block", s, "ff2.w"))), w(name("block", s, "ff2.b")));
  return ad::add(h, f2);
}

std::pair<Var, Var> cross_encode(const Weights& w, const EdcpConfig& cfg, const Var& fx,
                                 const Var& fy) {
  if (fx.shape().size() != 2 || fy.shape().size() != 2 || fx.shape()[1] != cfg.d ||
      fy.shape()[1] != cfg.d) {
    ad::shape_mismatch("cross_encode", fx.shape(), fy.shape());
  }
  Var a = fx, b = fy;
  for (std::size_t s = 0; s < cfg.blocks; ++s) {
    const Var na = cross_block(w, cfg, s, a, b);
    const Var nb = cross_block(w, cfg, s, b, a);
    a = na;
    b = nb;
  }
  return {a, b};
}

std::pair<Tensor, Tensor> cross_encode(const EdcpModel& model, const Tensor& fx,
                                       const Tensor& fy) {
  ad::Tape tape;
  const Weights w{tape, model.params(), false};
  auto [a, b] = cross_encode(w, model.config(), tape.constant(fx), tape.constant(fy));
  return {a.value(), b.value()};
}

// ---- matching --------------------------------------------------------------------

SoftMatch soft_match(const Tensor& phi_x, const Tensor& phi_y, const PointCloud& y) {
  if (phi_x.rank() != 2 || phi_y.rank() != 2 || phi_x.dim(1) != phi_y.dim(1) ||
      phi_y.dim(0) != y.size()) {
    ad::shape_mismatch("soft_match", phi_x.shape(), phi_y.shape());
  }
  Tensor logits = ad::kernels::matmul_nt(phi_x, phi_y);
  const double inv = 1.0 / std::sqrt(static_cast<double>(phi_x.dim(1)));
  for (double& v : logits.values()) v *= inv;
  SoftMatch out{ad::kernels::softmax(logits, 1), {}};
  const std::size_t n = phi_x.dim(0), m = phi_y.dim(0);
  out.y_hat.assign(n, Vec3::Zero());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.y_hat[i] += out.m.at(i, j) * y[j];
  return out;
}

namespace {

struct Embedded {
  Tensor phi_x, phi_y;
};

Embedded embed_pair(const EdcpModel& model, const PointCloud& x, const PointCloud& y) {
  const EdcpConfig& cfg = model.config();
  auto [px, py] = network_inputs(x, y);
  ad::Tape tape;
  const Weights w{tape, model.params(), false};
  const Var fx = dgcnn_embed(w, cfg, px, knn_graph(x, cfg.k_neighbors));
  const Var fy = dgcnn_embed(w, cfg, py, knn_graph(y, cfg.k_neighbors));
  auto [a, b] = cross_encode(w, cfg, fx, fy);
  return {a.value(), b.value()};
}

}  // namespace

EdcpResult edcp_register(const EdcpModel& model, const PointCloud& x, const PointCloud& y) {
  if (x.size() < 3 || y.size() < 3) {
    fail(ErrorCode::DegenerateConfiguration, "edcp needs at least 3 points per cloud");
  }
  const Embedded e = embed_pair(model, x, y);
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const std::size_t n = x.size(), m = y.size(), d = e.phi_x.dim(1);
  const Eigen::Map<const RowMat> px(e.phi_x.data(), n, d);
  const Eigen::Map<const RowMat> py(e.phi_y.data(), m, d);
  Eigen::MatrixXd ym(m, 3);
  for (std::size_t j = 0; j < m; ++j) ym.row(j) = y[j].transpose();
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));

  // Row blocks keep the N x M match matrix from being held at once.
  std::vector<Vec3> y_hat(n);
  double confidence = 0.0;
  constexpr std::size_t kBlock = 256;
  for (std::size_t r0 = 0; r0 < n; r0 += kBlock) {
    const std::size_t rows = std::min(kBlock, n - r0);
    RowMat logits = (px.middleRows(r0, rows) * py.transpose()) * inv;
    for (std::size_t r = 0; r < rows; ++r) {
      auto row = logits.row(r);
      row.array() = (row.array() - row.maxCoeff()).exp();
      row /= row.sum();
      confidence += row.maxCoeff();
      y_hat[r0 + r] = (row * ym).transpose();
    }
  }
  const std::vector<double> weights(n, 1.0);
  return {kabsch(std::span<const Vec3>(x.points()), y_hat, weights),
          confidence / static_cast<double>(n)};
}

std::vector<std::pair<std::size_t, std::size_t>> correspondences_from_provenance(
    const PointCloud& x, const PointCloud& y) {
  if (!x.has_provenance() || !y.has_provenance()) {
    fail(ErrorCode::InvalidArgument, "correspondences need provenance on both clouds");
  }
  std::vector<std::pair<std::int64_t, std::size_t>> ys;
  for (std::size_t j = 0; j < y.size(); ++j) ys.emplace_back(y.provenance()[j], j);
  std::sort(ys.begin(), ys.end());
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto it = std::lower_bound(ys.begin(), ys.end(),
                                     std::make_pair(x.provenance()[i], std::size_t{0}));
    if (it != ys.end() && it->first == x.provenance()[i]) out.emplace_back(i, it->second);
  }
  return out;
}

// ---- training ------------------------------------------------------------------

namespace {

struct Prepared {
  Tensor px, py;
  NeighborTable nx, ny;
  std::vector<std::size_t> xi, yi;
};

Prepared prepare(const EdcpConfig& cfg, const TrainPair& pair) {
  if (pair.correspondence.empty()) {
    fail(ErrorCode::InvalidArgument, "training pair has no correspondences");
  }
  auto [px, py] = network_inputs(pair.x, pair.y);
  Prepared p{std::move(px), std::move(py), knn_graph(pair.x, cfg.k_neighbors),
             knn_graph(pair.y, cfg.k_neighbors), {}, {}};
  for (const auto& [i, j] : pair.correspondence) {
    if (i >= pair.x.size() || j >= pair.y.size()) {
      fail(ErrorCode::IndexOutOfRange, "correspondence index out of range");
    }
    p.xi.push_back(i);
    p.yi.push_back(j);
  }
  return p;
}

Var prepared_loss(const Weights& w, const EdcpConfig& cfg, const Prepared& p) {
  const Var fx = dgcnn_embed(w, cfg, p.px, p.nx);
  const Var fy = dgcnn_embed(w, cfg, p.py, p.ny);
  auto [a, b] = cross_encode(w, cfg, fx, fy);
  const double inv = 1.0 / std::sqrt(static_cast<double>(cfg.d));
  const Var logp = ad::log_softmax(ad::scale(ad::matmul(a, ad::transpose(b)), inv), 1);
  const Var picked = ad::pick(ad::gather_rows(logp, p.xi), p.yi);
  return ad::scale(ad::mean(picked), -1.0);
}

}  // namespace

Var match_loss(const Weights& w, const EdcpConfig& cfg, const TrainPair& pair) {
  return prepared_loss(w, cfg, prepare(cfg, pair));
}

TrainResult train_edcp(EdcpModel& model, std::span<const TrainPair> pairs,
                       const TrainConfig& cfg) {
  cfg.validate();
  if (pairs.empty()) fail(ErrorCode::EmptyDataset, "no training pairs");
  const EdcpConfig& mc = model.config();
  std::vector<Prepared> data;
  data.reserve(pairs.size());
  for (const auto& p : pairs) data.push_back(prepare(mc, p));

  ad::ParamStore& params = model.params();
  for (auto& e : params.entries()) e.momentum.fill(0.0);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> losses(data.size());
  TrainResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 rng(synth::mix_seed(cfg.seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      params.zero_grad();
      const double inv = 1.0 / static_cast<double>(b1 - b0);
      for (std::size_t b = b0; b < b1; ++b) {
        ad::Tape tape;
        const Var loss = prepared_loss(Weights{tape, params, true}, mc, data[order[b]]);
        tape.backward(loss);
        tape.accumulate_into(params, inv);
        losses[order[b]] = loss.value().item();
      }
      ad::sgd_step(params, cfg.lr, cfg.momentum);
    }
    double total = 0.0;
    for (double l : losses) total += l;
    result.history.push_back(total / static_cast<double>(losses.size()));
  }
  return result;
}

// ---- timing -----------------------------------------------------------------------

std::vector<TimingRow> complexity_probe(std::span<const std::size_t> sizes, std::size_t d,
                                        AttentionVariant variant, std::size_t repeats,
                                        std::uint64_t seed) {
  if (!std::is_sorted(sizes.begin(), sizes.end())) {
    fail(ErrorCode::InvalidArgument, "probe sizes must be ascending");
  }
  repeats = std::max<std::size_t>(repeats, 5);
  std::vector<TimingRow> rows;
  for (std::size_t n : sizes) {
    std::mt19937_64 rng(synth::mix_seed(seed, n));
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<Tensor> qkv;
    for (int m = 0; m < 3; ++m) {
      Tensor t({n, d});
      for (double& v : t.values()) v = u(rng);
      qkv.push_back(std::move(t));
    }
    auto run = [&] {
      return variant == AttentionVariant::Efficient
                 ? efficient_attention(qkv[0], qkv[1], qkv[2])
                 : dot_product_attention(qkv[0], qkv[1], qkv[2]);
    };
    volatile double sink = run()[0];  // warm-up
    std::vector<double> times;
    for (std::size_t r = 0; r < repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      sink = sink + run()[0];
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    std::nth_element(times.begin(), times.begin() + times.size() / 2, times.end());
    rows.push_back({n, times[times.size() / 2]});
  }
  return rows;
}

}  // namespace castreg::edcp
