#pragma once

// Finite-difference gradient checks shared by the unit tests and the
// acceptance binary. Each check builds `instances` random small problems and
// returns the worst relative error.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "castreg/autodiff.hpp"
#include "castreg/edcp.hpp"
#include "castreg/fusion.hpp"

namespace castreg::test {

inline ad::Tensor random_tensor(ad::Shape shape, std::mt19937_64& rng, double lo = -1.0,
                                double hi = 1.0) {
  ad::Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

// Random weighting of the output so the loss depends on every element.
inline ad::Var probe_loss(ad::Tape& tape, const ad::Var& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto w = tape.constant(random_tensor(out.shape(), rng));
  return ad::sum(ad::mul(out, w));
}

struct GradCheck {
  std::string name;
  std::function<double(std::mt19937_64&)> run;  // one random instance
};

inline std::vector<GradCheck> primitive_checks() {
  using ad::Tape;
  using ad::Var;
  using In = std::span<const Var>;
  auto dim = [](std::mt19937_64& rng, std::size_t lo = 2, std::size_t hi = 5) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  auto check = [](std::mt19937_64& rng, std::vector<ad::Tensor> inputs,
                  std::function<Var(Tape&, In)> f) {
    const std::uint64_t s = rng();
    return ad::finite_diff_check(
        [f, s](Tape& t, In v) { return probe_loss(t, f(t, v), s); }, inputs);
  };

  std::vector<GradCheck> c;
  c.push_back({"matmul", [=](auto& rng) {
                 std::size_t n = dim(rng), k = dim(rng), m = dim(rng);
                 return check(rng, {random_tensor({n, k}, rng), random_tensor({k, m}, rng)},
                              [](Tape&, In v) { return ad::matmul(v[0], v[1]); });
               }});
  c.push_back({"transpose", [=](auto& rng) {
                 return check(rng, {random_tensor({dim(rng), dim(rng)}, rng)},
                              [](Tape&, In v) { return ad::transpose(v[0]); });
               }});
  c.push_back({"add", [=](auto& rng) {
                 ad::Shape s{dim(rng), dim(rng)};
                 return check(rng, {random_tensor(s, rng), random_tensor(s, rng)},
                              [](Tape&, In v) { return ad::add(v[0], v[1]); });
               }});
  c.push_back({"sub", [=](auto& rng) {
                 ad::Shape s{dim(rng), dim(rng)};
                 return check(rng, {random_tensor(s, rng), random_tensor(s, rng)},
                              [](Tape&, In v) { return ad::sub(v[0], v[1]); });
               }});
  c.push_back({"mul", [=](auto& rng) {
                 ad::Shape s{dim(rng), dim(rng), dim(rng, 1, 3)};
                 return check(rng, {random_tensor(s, rng), random_tensor(s, rng)},
                              [](Tape&, In v) { return ad::mul(v[0], v[1]); });
               }});
  c.push_back({"scale", [=](auto& rng) {
                 return check(rng, {random_tensor({dim(rng), dim(rng)}, rng)},
                              [](Tape&, In v) { return ad::add_scalar(ad::scale(v[0], -1.7), 0.3); });
               }});
  c.push_back({"add_bias", [=](auto& rng) {
                 std::size_t n = dim(rng), m = dim(rng);
                 return check(rng, {random_tensor({n, m}, rng), random_tensor({m}, rng)},
                              [](Tape&, In v) { return ad::add_bias(v[0], v[1]); });
               }});
  c.push_back({"leaky_relu", [=](auto& rng) {
                 // Values kept away from the kink at 0.
                 auto t = random_tensor({dim(rng), dim(rng)}, rng, 0.05, 1.0);
                 std::bernoulli_distribution flip(0.5);
                 for (auto& v : t.values()) if (flip(rng)) v = -v;
                 return check(rng, {t}, [](Tape&, In v) { return ad::leaky_relu(v[0], 0.01); });
               }});
  c.push_back({"softmax", [=](auto& rng) {
                 std::size_t axis = dim(rng, 0, 1);
                 return check(rng, {random_tensor({dim(rng), dim(rng)}, rng, -2, 2)},
                              [axis](Tape&, In v) { return ad::softmax(v[0], axis); });
               }});
  c.push_back({"log_softmax", [=](auto& rng) {
                 std::size_t axis = dim(rng, 0, 2);
                 return check(rng, {random_tensor({dim(rng), dim(rng), dim(rng)}, rng, -2, 2)},
                              [axis](Tape&, In v) { return ad::log_softmax(v[0], axis); });
               }});
  c.push_back({"layer_norm", [=](auto& rng) {
                 std::size_t n = dim(rng), m = dim(rng, 3, 6);
                 return check(rng,
                              {random_tensor({n, m}, rng, -2, 2), random_tensor({m}, rng),
                               random_tensor({m}, rng)},
                              [](Tape&, In v) { return ad::layer_norm(v[0], 1, v[1], v[2]); });
               }});
  c.push_back({"reduce_max", [=](auto& rng) {
                 // Distinct values so the arg max is stable under the probe step.
                 std::size_t n = dim(rng), m = dim(rng);
                 ad::Tensor t({n, m});
                 std::vector<double> vals(n * m);
                 for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.1 * static_cast<double>(i);
                 std::shuffle(vals.begin(), vals.end(), rng);
                 std::copy(vals.begin(), vals.end(), t.values().begin());
                 std::size_t axis = dim(rng, 0, 1);
                 return check(rng, {t}, [axis](Tape&, In v) { return ad::reduce_max(v[0], axis); });
               }});
  c.push_back({"reduce_mean", [=](auto& rng) {
                 std::size_t axis = dim(rng, 0, 2);
                 return check(rng, {random_tensor({dim(rng), dim(rng), dim(rng)}, rng)},
                              [axis](Tape&, In v) { return ad::reduce_mean(v[0], axis); });
               }});
  c.push_back({"concat", [=](auto& rng) {
                 std::size_t n = dim(rng);
                 return check(rng,
                              {random_tensor({n, dim(rng)}, rng), random_tensor({n, dim(rng)}, rng)},
                              [](Tape&, In v) { return ad::concat({v[0], v[1]}, 1); });
               }});
  c.push_back({"gather_rows", [=](auto& rng) {
                 std::size_t n = dim(rng);
                 std::vector<std::size_t> idx(dim(rng, 3, 8));
                 for (auto& i : idx) i = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
                 return check(rng, {random_tensor({n, dim(rng)}, rng)},
                              [idx](Tape&, In v) { return ad::gather_rows(v[0], idx); });
               }});
  c.push_back({"reshape_slice", [=](auto& rng) {
                 std::size_t n = dim(rng), m = dim(rng, 2, 4);
                 return check(rng, {random_tensor({n, m}, rng)}, [n, m](Tape&, In v) {
                   return ad::slice(ad::reshape(v[0], {m, n}), 1, 1, n);
                 });
               }});
  c.push_back({"pick_cross_entropy", [=](auto& rng) {
                 std::size_t n = dim(rng), m = dim(rng);
                 std::vector<std::size_t> cols(n);
                 for (auto& i : cols) i = std::uniform_int_distribution<std::size_t>(0, m - 1)(rng);
                 return check(rng, {random_tensor({n, m}, rng, -2, 2)}, [cols](Tape&, In v) {
                   return ad::scale(ad::pick(ad::log_softmax(v[0], 1), cols), -1.0);
                 });
               }});
  c.push_back({"huber_loss", [=](auto& rng) {
                 // Residuals avoid |a| = delta, where the loss is only C1.
                 ad::Shape s{dim(rng), dim(rng)};
                 auto pred = random_tensor(s, rng, -2, 2);
                 auto target = random_tensor(s, rng, -2, 2);
                 for (std::size_t i = 0; i < pred.size(); ++i)
                   if (std::abs(std::abs(pred[i] - target[i]) - 0.5) < 0.05) pred[i] += 0.2;
                 return check(rng, {pred, target},
                              [](Tape&, In v) { return ad::huber_loss(v[0], v[1], 0.5); });
               }});
  c.push_back({"edge_conv_max", [=](auto& rng) {
                 std::size_t n = dim(rng, 4, 7), k = dim(rng, 1, 3), ch = dim(rng);
                 std::vector<std::size_t> nbr(n * k);
                 for (auto& i : nbr) i = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
                 auto center = random_tensor({n, ch}, rng);
                 auto neighbor = random_tensor({n, ch}, rng, -4, 4);
                 return check(rng, {center, neighbor, random_tensor({ch}, rng, -0.01, 0.01)},
                              [nbr, k](Tape&, In v) {
                                return ad::edge_conv_max(v[0], v[1], v[2], nbr, k, 0.2);
                              });
               }});
  return c;
}

// Cross-encoder block: gradient of the block output w.r.t. every parameter.
inline double cross_block_check(std::mt19937_64& rng) {
  edcp::EdcpConfig cfg;
  cfg.d = 4;
  cfg.widths = {4, 4};
  cfg.heads = 2;
  cfg.blocks = 1;
  cfg.variant = std::uniform_int_distribution<int>(0, 1)(rng) ? edcp::AttentionVariant::Efficient
                                                             : edcp::AttentionVariant::DotProduct;
  edcp::EdcpModel model(cfg, rng());
  const std::size_t n = std::uniform_int_distribution<std::size_t>(3, 6)(rng);
  const std::size_t m = std::uniform_int_distribution<std::size_t>(3, 6)(rng);
  auto a = random_tensor({n, cfg.d}, rng), b = random_tensor({m, cfg.d}, rng);
  const std::uint64_t s = rng();
  double worst = ad::finite_diff_check(model.params(), [&](ad::Tape& tape) {
    edcp::Weights w{tape, model.params(), true};
    auto out = edcp::cross_block(w, cfg, 0, tape.constant(a), tape.constant(b));
    return probe_loss(tape, out, s);
  });
  // And w.r.t. the inputs themselves.
  worst = std::max(worst, ad::finite_diff_check(
                              [&](ad::Tape& tape, std::span<const ad::Var> v) {
                                edcp::Weights w{tape, model.params(), false};
                                return probe_loss(tape, edcp::cross_block(w, cfg, 0, v[0], v[1]), s);
                              },
                              {a, b}));
  return worst;
}

// Fusion MLP: softmax weights w.r.t. every parameter.
inline double fusion_mlp_check(std::mt19937_64& rng) {
  fusion::FusionMlp mlp({6, 5}, rng());
  fusion::Features shift, scale;
  for (std::size_t i = 0; i < fusion::kFeatureDim; ++i) {
    shift[i] = std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
    scale[i] = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
  }
  mlp.set_input_normalization(shift, scale);
  auto f = random_tensor({1, fusion::kFeatureDim}, rng);
  const std::uint64_t s = rng();
  return ad::finite_diff_check(mlp.params(), [&](ad::Tape& tape) {
    return probe_loss(tape, mlp.forward(tape, tape.constant(f), true), s);
  });
}

}  // namespace castreg::test
