#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"

#include "castreg/autodiff.hpp"
#include "castreg/error.hpp"
#include "grad_suite.hpp"

using namespace castreg;
using namespace castreg::ad;
using castreg::test::random_tensor;

TEST_CASE("tensor shape invariants") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.at(1, 2) == 1.5);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), Error);
  CHECK_THROWS_AS(t.reshaped({4, 2}), Error);
  CHECK(Tensor::scalar(3.0).item() == 3.0);
}

TEST_CASE("softmax") {
  Tape tape;
  auto z = tape.constant(Tensor({1, 4}, 0.0));
  auto s = softmax(z, 1);
  for (double v : s.value().values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

  std::mt19937_64 rng(1);
  auto x = random_tensor({5, 7}, rng, -30, 30);
  auto shifted = x;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 7; ++j) shifted.at(i, j) += 100.0 * static_cast<double>(i);
  auto a = kernels::softmax(x, 1), b = kernels::softmax(shifted, 1);
  for (std::size_t i = 0; i < 5; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 7; ++j) {
      row += a.at(i, j);
      CHECK(std::abs(a.at(i, j) - b.at(i, j)) < 1e-12);
    }
    CHECK(std::abs(row - 1.0) < 1e-12);
  }
}

TEST_CASE("matmul and reductions") {
  std::mt19937_64 rng(2);
  auto a = random_tensor({3, 4}, rng);
  Tensor eye({3, 3}, 0.0);
  for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  auto p = kernels::matmul(eye, a);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(p[i] == a[i]);

  Tape tape;
  auto t = random_tensor({3, 4, 2}, rng);
  auto v = tape.constant(t);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    auto mx = reduce_max(v, axis).value();
    auto mn = reduce_mean(v, axis).value();
    auto av = axis_view(t.shape(), axis);
    for (std::size_t o = 0; o < av.outer; ++o)
      for (std::size_t in = 0; in < av.inner; ++in) {
        double best = -1e300, sum = 0.0;
        for (std::size_t l = 0; l < av.length; ++l) {
          double x = t[(o * av.length + l) * av.inner + in];
          best = std::max(best, x);
          sum += x;
        }
        CHECK(mx[o * av.inner + in] == best);
        CHECK(mn[o * av.inner + in] == doctest::Approx(sum / av.length).epsilon(1e-14));
      }
  }

  std::vector<std::size_t> idx{2, 0, 2};
  auto g = gather_rows(tape.constant(a), idx).value();
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(g.at(r, c) == a.at(idx[r], c));
}

TEST_CASE("shape errors name both shapes") {
  Tape tape;
  auto a = tape.constant(Tensor({2, 3}));
  auto b = tape.constant(Tensor({4, 5}));
  try {
    matmul(a, b);
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ShapeMismatch);
    std::string msg = e.what();
    CHECK(msg.find("2") != std::string::npos);
    CHECK(msg.find("5") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, b), Error);
  CHECK_THROWS_AS(huber_loss(a, b, 1.0), Error);
}

TEST_CASE("huber values") {
  CHECK(huber(0.0, 1.0) == 0.0);
  CHECK(huber(0.5, 1.0) == 0.125);
  CHECK(huber(2.0, 1.0) == 1.5);
  CHECK(huber(-2.0, 1.0) == 1.5);
  CHECK(huber(0.02, 0.05) == doctest::Approx(0.0002).epsilon(1e-12));
  // C1 at the threshold, monotone in |a|.
  const double d = 0.3;
  CHECK(std::abs(huber(d + 1e-9, d) - huber(d - 1e-9, d)) < 1e-9);
  double prev = 0.0;
  for (double a = 0.0; a < 2.0; a += 0.01) {
    CHECK(huber(a, d) >= prev);
    prev = huber(a, d);
  }

  Tape tape;
  auto p = tape.constant(Tensor({1, 3}, std::vector<double>{0.1, -0.2, 0.05}));
  auto y = tape.constant(Tensor({1, 3}, 0.0));
  double mse_half = (0.01 + 0.04 + 0.0025) / 3.0 / 2.0;
  CHECK(huber_loss(p, y, 1.0).value().item() == doctest::Approx(mse_half).epsilon(1e-14));
}

TEST_CASE("backward basics") {
  Tape tape;
  std::mt19937_64 rng(3);
  auto pt = random_tensor({3, 2}, rng);
  auto p = tape.variable(pt);
  auto loss = sum(p);
  tape.backward(loss);
  for (double g : tape.grad(p).values()) CHECK(g == 1.0);

  Tape t2;
  auto q = t2.variable(pt);
  t2.backward(scale(sum(mul(q, q)), 0.5));
  for (std::size_t i = 0; i < pt.size(); ++i) CHECK(t2.grad(q)[i] == doctest::Approx(pt[i]));

  Tape t3;
  auto r = t3.variable(pt);
  auto m = mean(r);
  CHECK_THROWS_AS(t3.grad(r), Error);
  CHECK_THROWS_AS(t3.backward(r), Error);  // not a scalar
  t3.backward(m);
  CHECK(t3.has_gradients());
  CHECK_THROWS_AS(Var().value(), Error);
}

TEST_CASE("fan-out accumulates contributions") {
  std::mt19937_64 rng(4);
  auto xt = random_tensor({3, 3}, rng);
  auto wt = random_tensor({3, 3}, rng);
  // f(x) = sum(x W) + sum(leaky(x)) + sum(x * x) with x shared.
  Tape shared;
  auto x = shared.variable(xt);
  auto w = shared.constant(wt);
  shared.backward(add(add(sum(matmul(x, w)), sum(leaky_relu(x))), sum(mul(x, x))));

  Tensor expect({3, 3}, 0.0);
  for (int branch = 0; branch < 3; ++branch) {
    Tape t;
    auto xi = t.variable(xt);
    auto wi = t.constant(wt);
    Var out = branch == 0 ? sum(matmul(xi, wi)) : branch == 1 ? sum(leaky_relu(xi)) : sum(mul(xi, xi));
    t.backward(out);
    for (std::size_t i = 0; i < expect.size(); ++i) expect[i] += t.grad(xi)[i];
  }
  for (std::size_t i = 0; i < expect.size(); ++i) CHECK(shared.grad(x)[i] == doctest::Approx(expect[i]).epsilon(1e-14));
}

TEST_CASE("unused parameters get zero gradient") {
  ParamStore store;
  store.add("used", Tensor({2}, 1.0));
  store.add("unused", Tensor({3}, 1.0));
  Tape tape;
  auto u = tape.param(store, "used");
  tape.backward(sum(u));
  store.zero_grad();
  tape.accumulate_into(store);
  for (double g : store.grad("unused").values()) CHECK(g == 0.0);
  for (double g : store.grad("used").values()) CHECK(g == 1.0);
}

TEST_CASE("sgd step with momentum") {
  ParamStore store;
  store.add("p", Tensor({2}, std::vector<double>{1.0, -1.0}));
  store.accumulate_grad("p", Tensor({2}, std::vector<double>{0.5, 0.25}));
  sgd_step(store, 0.1, 0.9);
  CHECK(store.value("p")[0] == doctest::Approx(1.0 - 0.05));
  // Same grad again: v = 0.9 * 0.5 + 0.5 = 0.95.
  sgd_step(store, 0.1, 0.9);
  CHECK(store.value("p")[0] == doctest::Approx(0.95 - 0.095));
  CHECK(store.value("p")[1] == doctest::Approx(-1.0 - 0.025 - 0.0475));
}

TEST_CASE("finite difference harness") {
  std::mt19937_64 rng(5);
  auto c = random_tensor({4}, rng);
  double lin = finite_diff_check(
      [&](Tape& t, std::span<const Var> v) { return sum(mul(v[0], t.constant(c))); },
      {random_tensor({4}, rng)});
  CHECK(lin < 1e-10);

  // Softmax cross-entropy composite.
  std::vector<std::size_t> labels{1, 0, 2};
  double ce = finite_diff_check(
      [&](Tape&, std::span<const Var> v) {
        return mean(scale(pick(log_softmax(v[0], 1), labels), -1.0));
      },
      {random_tensor({3, 4}, rng, -3, 3)});
  CHECK(ce < 1e-4);
}

TEST_CASE("three layer mlp gradient") {
  std::mt19937_64 rng(6);
  ParamStore store;
  store.add("w0", random_tensor({4, 6}, rng));
  store.add("b0", random_tensor({6}, rng));
  store.add("w1", random_tensor({6, 5}, rng));
  store.add("b1", random_tensor({5}, rng));
  store.add("w2", random_tensor({5, 2}, rng));
  auto x = random_tensor({3, 4}, rng);
  double err = finite_diff_check(store, [&](Tape& t) {
    auto h = leaky_relu(add_bias(matmul(t.constant(x), t.param(store, "w0")), t.param(store, "b0")));
    h = leaky_relu(add_bias(matmul(h, t.param(store, "w1")), t.param(store, "b1")));
    return mean(softmax(matmul(h, t.param(store, "w2")), 1));
  });
  CHECK(err < 1e-4);
}

TEST_CASE("primitive gradients") {
  for (const auto& c : test::primitive_checks()) {
    std::mt19937_64 rng(std::hash<std::string>{}(c.name));
    double worst = 0.0;
    for (int i = 0; i < 3; ++i) worst = std::max(worst, c.run(rng));
    INFO(c.name);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("param store checkpoint round trip") {
  std::mt19937_64 rng(7);
  ParamStore store;
  store.add("a", random_tensor({3, 2}, rng));
  store.add("b.c", random_tensor({5}, rng));
  auto path = std::filesystem::temp_directory_path() / "castreg_params.txt";
  store.save(path);
  auto back = ParamStore::read(path);
  REQUIRE(back.entries().size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back.entries()[i].name == store.entries()[i].name);
    CHECK(back.entries()[i].value.shape() == store.entries()[i].value.shape());
    for (std::size_t j = 0; j < store.entries()[i].value.size(); ++j)
      CHECK(back.entries()[i].value[j] == store.entries()[i].value[j]);
  }
  ParamStore wrong;
  wrong.add("a", Tensor({2, 3}));
  wrong.add("b.c", Tensor({5}));
  CHECK_THROWS_AS(wrong.load(path), Error);
  CHECK(store.parameter_count() == 11);
}
