#include "castreg/fusion.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "castreg/synth.hpp"

namespace castreg::fusion {

using ad::Tensor;
using ad::Var;
using nlohmann::json;

Features fusion_features(const RigidTransform& t1, const RigidTransform& t2, double rmse1,
                         double rmse2) {
  if (!(rmse1 >= 0.0) || !(rmse2 >= 0.0)) {
    fail(ErrorCode::InvalidArgument, "channel rmse must be nonnegative");
  }
  const Vec6 a = se3_log(t1).as_vector();
  const Vec6 b = se3_log(t2).as_vector();
  Features f{};
  for (int i = 0; i < 6; ++i) {
    f[i] = a[i];
    f[6 + i] = b[i];
  }
  f[12] = rmse1;
  f[13] = rmse2;
  return f;
}

namespace {

std::string layer(std::size_t l, const char* field) {
  return "fc" + std::to_string(l) + "." + field;
}

Tensor glorot(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Tensor t({fan_in, fan_out});
  for (double& v : t.values()) v = u(rng);
  return t;
}

}  // namespace

FusionMlp::FusionMlp(std::vector<std::size_t> widths, std::uint64_t seed)
    : widths_(std::move(widths)) {
  scale_.fill(1.0);
  for (std::size_t w : widths_)
    if (w == 0) fail(ErrorCode::InvalidArgument, "MLP widths must be positive");
  std::mt19937_64 rng(synth::mix_seed(seed, 0xf05e));
  std::size_t in = kFeatureDim;
  for (std::size_t l = 0; l < widths_.size(); ++l) {
    params_.add(layer(l, "w"), glorot(in, widths_[l], rng));
    params_.add(layer(l, "b"), Tensor({widths_[l]}));
    in = widths_[l];
  }
  params_.add("out.w", glorot(in, 2, rng));
  params_.add("out.b", Tensor({2}));
}

FusionMlp FusionMlp::zeros(std::vector<std::size_t> widths) {
  FusionMlp m(std::move(widths));
  for (auto& e : m.params_.entries()) e.value.fill(0.0);
  return m;
}

void FusionMlp::set_input_normalization(const Features& shift, const Features& scale) {
  for (std::size_t i = 0; i < kFeatureDim; ++i) {
    if (!std::isfinite(shift[i]) || !(scale[i] > 0.0) || !std::isfinite(scale[i])) {
      fail(ErrorCode::InvalidArgument, "input normalization needs finite shift and positive scale");
    }
  }
  shift_ = shift;
  scale_ = scale;
}

Var FusionMlp::forward(ad::Tape& tape, const Var& features, bool train) const {
  if (features.shape() != ad::Shape{1, kFeatureDim}) {
    ad::shape_mismatch("fusion_forward", {1, kFeatureDim}, features.shape());
  }
  auto w = [&](const std::string& n) {
    return train ? tape.param(params_, n) : tape.constant(params_.value(n));
  };
  Tensor shift({1, kFeatureDim}), inv({1, kFeatureDim});
  for (std::size_t i = 0; i < kFeatureDim; ++i) {
    shift[i] = shift_[i];
    inv[i] = 1.0 / scale_[i];
  }
  Var x = ad::mul(ad::sub(features, tape.constant(shift)), tape.constant(inv));
  for (std::size_t l = 0; l < widths_.size(); ++l) {
    x = ad::leaky_relu(ad::add_bias(ad::matmul(x, w(layer(l, "w"))), w(layer(l, "b"))));
  }
  return ad::softmax(ad::add_bias(ad::matmul(x, w("out.w")), w("out.b")), 1);
}

void FusionMlp::save(const std::filesystem::path& path) const {
  params_.save(path);
  std::ofstream out(path.string() + ".json", std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string() + ".json");
  out << json{{"widths", widths_}, {"input_shift", shift_}, {"input_scale", scale_}}.dump(2)
      << '\n';
}

FusionMlp FusionMlp::load(const std::filesystem::path& path) {
  const std::filesystem::path meta = path.string() + ".json";
  if (!std::filesystem::exists(meta) || !std::filesystem::exists(path)) {
    fail(ErrorCode::MissingCheckpoint, "no fusion checkpoint at " + path.string());
  }
  std::ifstream in(meta);
  std::vector<std::size_t> widths;
  Features shift{}, scale{};
  try {
    const json j = json::parse(in);
    widths = j.at("widths").get<std::vector<std::size_t>>();
    shift = j.at("input_shift").get<Features>();
    scale = j.at("input_scale").get<Features>();
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, meta.string() + ": " + e.what());
  }
  FusionMlp mlp(widths);
  mlp.set_input_normalization(shift, scale);
  mlp.params_.load(path);
  return mlp;
}

BlendWeights fusion_forward(const FusionMlp& mlp, std::span<const double> features) {
  if (features.size() != kFeatureDim) {
    ad::shape_mismatch("fusion_forward", {kFeatureDim}, {features.size()});
  }
  ad::Tape tape;
  const Var f = tape.constant(Tensor({1, kFeatureDim}, {features.begin(), features.end()}));
  const Tensor& w = mlp.forward(tape, f, false).value();
  return {w[0], w[1]};
}

RigidTransform blend_transforms(const RigidTransform& t1, const RigidTransform& t2, double w1,
                                double w2, const Twist& eps) {
  const Vec6 v = w1 * se3_log(t1).as_vector() + w2 * se3_log(t2).as_vector() + eps.as_vector();
  return se3_exp(Twist::from_vector(v));
}

void FusionTrainConfig::validate() const {
  if (!(delta > 0.0)) fail(ErrorCode::InvalidArgument, "Huber delta must be positive");
  if (!(lr >= 0.0) || epochs < 1 || batch_size < 1 || !(fd_step > 0.0) ||
      !(momentum >= 0.0 && momentum < 1.0)) {
    fail(ErrorCode::InvalidArgument, "invalid fusion training settings");
  }
}

double blend_error(const FusionSample& s, double w1, double w2) {
  if (s.x_sub.empty()) fail(ErrorCode::InvalidArgument, "fusion sample has no subsample");
  const RigidTransform t = blend_transforms(s.t1, s.t2, w1, w2);
  double acc = 0.0;
  for (const auto& p : s.x_sub) acc += (t * p - s.truth * p).squaredNorm();
  return std::sqrt(acc / static_cast<double>(s.x_sub.size()));
}

std::pair<Features, Features> feature_statistics(std::span<const FusionSample> samples) {
  if (samples.empty()) fail(ErrorCode::TooFewSamples, "no fusion samples");
  Features mean{}, sq{};
  for (const auto& s : samples) {
    const Features f = fusion_features(s.t1, s.t2, s.rmse1, s.rmse2);
    for (std::size_t i = 0; i < kFeatureDim; ++i) mean[i] += f[i];
  }
  const double n = static_cast<double>(samples.size());
  for (double& m : mean) m /= n;
  for (const auto& s : samples) {
    const Features f = fusion_features(s.t1, s.t2, s.rmse1, s.rmse2);
    for (std::size_t i = 0; i < kFeatureDim; ++i) sq[i] += (f[i] - mean[i]) * (f[i] - mean[i]);
  }
  Features sd{};
  for (std::size_t i = 0; i < kFeatureDim; ++i) {
    sd[i] = std::sqrt(sq[i] / n);
    if (!(sd[i] > 1e-12)) sd[i] = 1.0;
  }
  return {mean, sd};
}

FusionTrainResult train_fusion(FusionMlp& mlp, std::span<const FusionSample> samples,
                               const FusionTrainConfig& cfg) {
  cfg.validate();
  if (samples.size() < 10) {
    fail(ErrorCode::TooFewSamples,
         "fusion training needs at least 10 samples, got " + std::to_string(samples.size()));
  }
  std::vector<Tensor> feats;
  for (const auto& s : samples) {
    const Features f = fusion_features(s.t1, s.t2, s.rmse1, s.rmse2);
    feats.emplace_back(ad::Shape{1, kFeatureDim}, std::vector<double>(f.begin(), f.end()));
  }
  ad::ParamStore& params = mlp.params();
  for (auto& e : params.entries()) e.momentum.fill(0.0);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> losses(samples.size());
  const double h = cfg.fd_step;
  FusionTrainResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 rng(synth::mix_seed(cfg.seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(b1 - b0);
      params.zero_grad();
      for (std::size_t b = b0; b < b1; ++b) {
        const std::size_t i = order[b];
        const FusionSample& s = samples[i];
        ad::Tape tape;
        const Var w = mlp.forward(tape, tape.constant(feats[i]), true);
        const double w1 = w.value()[0], w2 = w.value()[1];
        const double a = blend_error(s, w1, w2);
        losses[i] = ad::huber(a, cfg.delta);
        // Central differences of a through the blend, one weight at a time.
        const double g1 = (blend_error(s, w1 + h, w2) - blend_error(s, w1 - h, w2)) / (2.0 * h);
        const double g2 = (blend_error(s, w1, w2 + h) - blend_error(s, w1, w2 - h)) / (2.0 * h);
        const double dl = std::abs(a) <= cfg.delta ? a : (a > 0.0 ? cfg.delta : -cfg.delta);
        const Var g = tape.constant(Tensor({1, 2}, {dl * g1 * inv, dl * g2 * inv}));
        const Var surrogate = ad::sum(ad::mul(w, g));
        tape.backward(surrogate);
        tape.accumulate_into(params);
      }
      ad::sgd_step(params, cfg.lr, cfg.momentum);
    }
    double total = 0.0;
    for (double l : losses) total += l;
    result.history.push_back(total / static_cast<double>(losses.size()));
  }
  return result;
}

std::vector<Vec3> strided_subsample(const PointCloud& cloud, std::size_t n) {
  if (n == 0) fail(ErrorCode::InvalidArgument, "subsample size must be positive");
  const std::size_t stride = std::max<std::size_t>(1, cloud.size() / n);
  std::vector<Vec3> out;
  for (std::size_t i = 0; i < cloud.size() && out.size() < n; i += stride) out.push_back(cloud[i]);
  return out;
}

double nn_rmse(std::span<const Vec3> points, const KdTree& tree, double cap) {
  if (points.empty()) fail(ErrorCode::InvalidArgument, "nn_rmse of no points");
  double acc = 0.0;
  for (const auto& p : points) {
    const double d = std::min(tree.nearest(p).distance, cap);
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(points.size()));
}

void EpsilonFilterConfig::validate() const {
  if (!(shrink > 0.0 && shrink < 1.0)) fail(ErrorCode::InvalidArgument, "shrink must be in (0, 1)");
  if (!(min_step > 0.0) || !(s0 > min_step)) {
    fail(ErrorCode::InvalidArgument, "initial step must exceed the minimum step");
  }
  if (subsample == 0 || !(translation_unit > 0.0) || !(truncation_factor >= 0.0)) {
    fail(ErrorCode::InvalidArgument, "invalid epsilon filter settings");
  }
}

double EpsilonFilterConfig::cap(const KdTree& y) const {
  if (truncation_factor == 0.0 || y.size() < 2) return std::numeric_limits<double>::infinity();
  return truncation_factor * median_spacing(y);
}

EpsilonResult epsilon_filter(std::span<const Vec3> x_sub, const KdTree& y, const Twist& base,
                             const EpsilonFilterConfig& cfg) {
  cfg.validate();
  const Vec6 b = base.as_vector();
  const double cap = cfg.cap(y);
  std::vector<Vec3> moved(x_sub.size());
  auto evaluate = [&](const Vec6& eps) {
    const RigidTransform t = se3_exp(Twist::from_vector(b + eps));
    for (std::size_t i = 0; i < x_sub.size(); ++i) moved[i] = t * x_sub[i];
    return nn_rmse(moved, y, cap);
  };
  Vec6 eps = Vec6::Zero();
  EpsilonResult res;
  res.initial_rmse = evaluate(eps);
  double best = res.initial_rmse;
  double s = cfg.s0;
  for (std::size_t it = 0; it < cfg.max_iterations && s >= cfg.min_step; ++it) {
    // Candidate 0 is the incumbent; ties keep the lowest index.
    int pick = 0;
    double pick_rmse = best;
    Vec6 pick_eps = eps;
    for (int j = 0; j < 6; ++j) {
      const double step = j < 3 ? s * cfg.translation_unit : s;
      for (int sign : {1, -1}) {
        Vec6 c = eps;
        c[j] += sign * step;
        const double r = evaluate(c);
        if (r < pick_rmse) {
          pick_rmse = r;
          pick_eps = c;
          pick = 1;
        }
      }
    }
    if (pick == 0) {
      s *= cfg.shrink;
    } else {
      eps = pick_eps;
      best = pick_rmse;
    }
    res.trace.push_back(best);
  }
  res.eps = Twist::from_vector(eps);
  res.rmse = best;
  return res;
}

namespace {

double translation_unit_for(const PointCloud& x) {
  return x.unit() == Unit::Normalized ? 1.0 : 0.5 * x.bbox_diagonal();
}

}  // namespace

EpsilonResult epsilon_filter(const PointCloud& x, const PointCloud& y,
                             const RigidTransform& blend, const EpsilonFilterConfig& cfg) {
  EpsilonFilterConfig c = cfg;
  c.translation_unit = translation_unit_for(x);
  const KdTree tree(y);
  return epsilon_filter(strided_subsample(x, c.subsample), tree, se3_log(blend), c);
}

ChannelOutputs run_channels(const PointCloud& x, const PointCloud& y, const RigidTransform& init,
                            const MdrConfig& cfg) {
  ChannelOutputs out;
  try {
    out.icp = msreg::multiscale_icp(x, y, cfg.pyramid, cfg.icp, init);
  } catch (const Error& e) {
    fail(e.code(), "icp channel: " + e.detail());
  }
  try {
    out.ndt = msreg::multiscale_ndt(x, y, cfg.pyramid, cfg.ndt, init);
  } catch (const Error& e) {
    fail(e.code(), "ndt channel: " + e.detail());
  }
  const KdTree tree(y);
  const std::vector<Vec3> sub = strided_subsample(x, cfg.eps.subsample);
  const double cap = cfg.eps.cap(tree);
  std::vector<Vec3> moved(sub.size());
  for (std::size_t i = 0; i < sub.size(); ++i) moved[i] = out.icp.transform * sub[i];
  out.rmse1 = nn_rmse(moved, tree, cap);
  for (std::size_t i = 0; i < sub.size(); ++i) moved[i] = out.ndt.transform * sub[i];
  out.rmse2 = nn_rmse(moved, tree, cap);
  return out;
}

MdrResult mdr_register(const PointCloud& x, const PointCloud& y, const RigidTransform& init,
                       const FusionMlp& mlp, const MdrConfig& cfg) {
  ChannelOutputs ch = run_channels(x, y, init, cfg);
  MdrResult res;
  res.t1 = ch.icp.transform;
  res.t2 = ch.ndt.transform;
  res.rmse1 = ch.rmse1;
  res.rmse2 = ch.rmse2;
  res.icp = std::move(ch.icp);
  res.ndt = std::move(ch.ndt);
  const Features f = fusion_features(res.t1, res.t2, res.rmse1, res.rmse2);
  res.weights = fusion_forward(mlp, f);

  const Vec6 base = res.weights.w1 * se3_log(res.t1).as_vector() +
                    res.weights.w2 * se3_log(res.t2).as_vector();
  EpsilonFilterConfig ec = cfg.eps;
  ec.translation_unit = translation_unit_for(x);
  const KdTree tree(y);
  const EpsilonResult er =
      epsilon_filter(strided_subsample(x, ec.subsample), tree, Twist::from_vector(base), ec);
  res.eps = er.eps;
  res.rmse = er.rmse;
  res.transform = se3_exp(Twist::from_vector(base + er.eps.as_vector()));
  return res;
}

std::string MdrResult::diagnostics_json() const {
  auto levels = [](const msreg::MultiscaleResult& m) {
    json arr = json::array();
    for (const auto& l : m.levels) {
      arr.push_back({{"level", l.level},
                     {"voxel", l.voxel},
                     {"points", l.points},
                     {"value", l.value},
                     {"iterations", l.iterations},
                     {"failed", l.failed},
                     {"error", l.error}});
    }
    return arr;
  };
  const Vec6 e = eps.as_vector();
  json j{{"transform", transform.to_array()},
         {"t1", t1.to_array()},
         {"t2", t2.to_array()},
         {"rmse1", rmse1},
         {"rmse2", rmse2},
         {"w1", weights.w1},
         {"w2", weights.w2},
         {"eps", std::vector<double>(e.data(), e.data() + 6)},
         {"rmse", rmse},
         {"icp_levels", levels(icp)},
         {"ndt_levels", levels(ndt)}};
  return j.dump(2);
}

}  // namespace castreg::fusion
