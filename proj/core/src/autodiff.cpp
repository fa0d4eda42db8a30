#include "castreg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace castreg::ad {

namespace {

void accumulate(Tensor& dst, const Tensor& src, double s = 1.0) {
  double* d = dst.data();
  const double* x = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s * x[i];
}

Tape& same_tape(const Var& a, const Var& b) {
  Tape& t = a.tape();
  if (&b.tape() != &t) fail(ErrorCode::InvalidArgument, "variables belong to different tapes");
  return t;
}

bool is_scalar(const Shape& s) { return shape_size(s) == 1 && s.empty(); }

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  return out;
}

}  // namespace

Tape& Var::tape() const {
  if (!tape_) fail(ErrorCode::BackwardBeforeForward, "variable was never recorded on a tape");
  return *tape_;
}

const Tensor& Var::value() const { return tape().value(id_); }

// ---- ParamStore ------------------------------------------------------------

Tensor& ParamStore::add(const std::string& name, Tensor init) {
  if (name.empty() || name.find_first_of(" \t\n") != std::string::npos) {
    fail(ErrorCode::InvalidArgument, "bad parameter name '" + name + "'");
  }
  if (index_.count(name)) fail(ErrorCode::InvalidArgument, "duplicate parameter " + name);
  index_[name] = entries_.size();
  Tensor grad(init.shape());
  Tensor mom(init.shape());
  entries_.push_back({name, std::move(init), std::move(grad), std::move(mom)});
  return entries_.back().value;
}

bool ParamStore::contains(const std::string& name) const { return index_.count(name) > 0; }

ParamStore::Entry& ParamStore::entry(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) fail(ErrorCode::InvalidArgument, "unknown parameter " + name);
  return entries_[it->second];
}

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) fail(ErrorCode::InvalidArgument, "unknown parameter " + name);
  return entries_[it->second];
}

Tensor& ParamStore::value(const std::string& name) { return entry(name).value; }
const Tensor& ParamStore::value(const std::string& name) const { return entry(name).value; }
const Tensor& ParamStore::grad(const std::string& name) const { return entry(name).grad; }

void ParamStore::accumulate_grad(const std::string& name, const Tensor& g, double scale) {
  Entry& e = entry(name);
  if (g.shape() != e.grad.shape()) shape_mismatch("accumulate_grad " + name, e.grad.shape(), g.shape());
  accumulate(e.grad, g, scale);
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.grad.fill(0.0);
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

void ParamStore::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out << "castreg-params 1\n" << entries_.size() << '\n';
  char buf[40];
  for (const auto& e : entries_) {
    out << e.name << ' ' << e.value.rank();
    for (std::size_t d : e.value.shape()) out << ' ' << d;
    out << '\n';
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", e.value[i]);
      out << (i ? " " : "") << buf;
    }
    out << '\n';
  }
  if (!out) fail(ErrorCode::IoError, "write failed for " + path.string());
}

ParamStore ParamStore::read(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    fail(ErrorCode::MissingCheckpoint, path.string() + " does not exist");
  }
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  auto bad = [&](const std::string& what) {
    fail(ErrorCode::ParseError, path.string() + ": " + what);
  };
  std::string magic;
  int version = 0;
  std::size_t count = 0;
  if (!(in >> magic >> version >> count) || magic != "castreg-params" || version != 1) {
    bad("not a parameter checkpoint");
  }
  ParamStore store;
  for (std::size_t p = 0; p < count; ++p) {
    std::string name;
    std::size_t rank = 0;
    if (!(in >> name >> rank) || rank > 3) bad("bad parameter header");
    Shape shape(rank);
    for (auto& d : shape)
      if (!(in >> d)) bad("bad shape for " + name);
    std::vector<double> values(shape_size(shape));
    for (auto& v : values) {
      std::string tok;
      if (!(in >> tok)) bad("truncated values for " + name);
      try {
        v = std::stod(tok);
      } catch (const std::exception&) {
        bad("bad number '" + tok + "' in " + name);
      }
    }
    store.add(name, Tensor(std::move(shape), std::move(values)));
  }
  return store;
}

void ParamStore::load(const std::filesystem::path& path) {
  const ParamStore loaded = read(path);
  for (auto& e : entries_) {
    if (!loaded.contains(e.name)) {
      fail(ErrorCode::MissingCheckpoint, path.string() + " lacks parameter " + e.name);
    }
    const Tensor& v = loaded.value(e.name);
    if (v.shape() != e.value.shape()) shape_mismatch("load " + e.name, e.value.shape(), v.shape());
    e.value = v;
  }
}

void sgd_step(ParamStore& store, double lr, double momentum) {
  if (!(lr >= 0.0) || !(momentum >= 0.0)) {
    fail(ErrorCode::InvalidArgument, "learning rate and momentum must be nonnegative");
  }
  for (auto& e : store.entries()) {
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      e.momentum[i] = momentum * e.momentum[i] + e.grad[i];
      e.value[i] -= lr * e.momentum[i];
    }
  }
}

// ---- Tape --------------------------------------------------------------------

Var Tape::constant(Tensor value) {
  backward_done_ = false;
  nodes_.push_back({std::move(value), {}, {}, {}, false, {}});
  return {this, nodes_.size() - 1};
}

Var Tape::variable(Tensor value) {
  backward_done_ = false;
  nodes_.push_back({std::move(value), {}, {}, {}, true, {}});
  return {this, nodes_.size() - 1};
}

Var Tape::param(const ParamStore& store, const std::string& name) {
  Var v = variable(store.value(name));
  nodes_[v.id()].param_name = name;
  return v;
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, Backward backward) {
  backward_done_ = false;
  bool req = false;
  for (std::size_t p : parents) req = req || nodes_[p].requires_grad;
  Node n{std::move(value), {}, {}, {}, req, {}};
  if (req) {
    n.parents = std::move(parents);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Tensor& Tape::grad_ref(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size()) {
    n.grad = Tensor(n.value.shape());
  }
  return n.grad;
}

void Tape::backward(const Var& loss) {
  if (&loss.tape() != this) fail(ErrorCode::InvalidArgument, "loss recorded on another tape");
  if (loss.value().size() != 1) {
    fail(ErrorCode::ShapeMismatch, "backward needs a scalar loss, got " +
                                       shape_string(loss.value().shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  grad_ref(loss.id()).fill(1.0);
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad) continue;
    if (n.grad.empty() && !n.value.empty()) {
      grad_ref(id);  // unused: zero gradient
      continue;
    }
    if (n.backward) n.backward(*this, id);
  }
  for (std::size_t id = loss.id() + 1; id < nodes_.size(); ++id) {
    if (nodes_[id].requires_grad) grad_ref(id);
  }
  backward_done_ = true;
}

const Tensor& Tape::grad(const Var& v) const {
  if (!backward_done_) {
    fail(ErrorCode::BackwardBeforeForward, "gradient requested before backward()");
  }
  if (&v.tape() != this) fail(ErrorCode::InvalidArgument, "variable from another tape");
  const Node& n = nodes_[v.id()];
  if (!n.requires_grad) fail(ErrorCode::InvalidArgument, "variable does not require gradients");
  return n.grad;
}

std::vector<std::pair<std::string, Tensor>> Tape::param_grads() const {
  if (!backward_done_) {
    fail(ErrorCode::BackwardBeforeForward, "parameter gradients requested before backward()");
  }
  std::vector<std::pair<std::string, Tensor>> out;
  std::map<std::string, std::size_t> seen;
  for (const auto& n : nodes_) {
    if (n.param_name.empty()) continue;
    const auto it = seen.find(n.param_name);
    if (it == seen.end()) {
      seen[n.param_name] = out.size();
      out.emplace_back(n.param_name, n.grad);
    } else {
      accumulate(out[it->second].second, n.grad);
    }
  }
  return out;
}

void Tape::accumulate_into(ParamStore& store, double scale) const {
  for (const auto& [name, g] : param_grads()) store.accumulate_grad(name, g, scale);
}

// ---- operations --------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(kernels::matmul(a.value(), b.value()), {ia, ib},
                  [ia, ib](Tape& t, std::size_t self) {
                    const Tensor& g = t.out_grad(self);
                    if (t.needs_grad(ia)) accumulate(t.grad_ref(ia), kernels::matmul_nt(g, t.value(ib)));
                    if (t.needs_grad(ib)) accumulate(t.grad_ref(ib), kernels::matmul_tn(t.value(ia), g));
                  });
}

Var transpose(const Var& a) {
  Tape& t = a.tape();
  const std::size_t ia = a.id();
  return t.record(kernels::transpose(a.value()), {ia}, [ia](Tape& t, std::size_t self) {
    accumulate(t.grad_ref(ia), kernels::transpose(t.out_grad(self)));
  });
}

namespace {

// Elementwise binary op with optional scalar broadcast of either side.
// kind: 0 add, 1 sub, 2 mul.
Var binary(const Var& a, const Var& b, int kind, const char* name) {
  Tape& t = same_tape(a, b);
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  const bool sa = is_scalar(va.shape()) && !is_scalar(vb.shape());
  const bool sb = is_scalar(vb.shape()) && !is_scalar(va.shape());
  if (!sa && !sb && va.shape() != vb.shape()) shape_mismatch(name, va.shape(), vb.shape());
  const Shape shape = sa ? vb.shape() : va.shape();
  Tensor out(shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = sa ? va[0] : va[i];
    const double y = sb ? vb[0] : vb[i];
    out[i] = kind == 0 ? x + y : kind == 1 ? x - y : x * y;
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    const Tensor& xa = t.value(ia);
    const Tensor& xb = t.value(ib);
    if (t.needs_grad(ia)) {
      Tensor& ga = t.grad_ref(ia);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double d = kind == 2 ? g[i] * (sb ? xb[0] : xb[i]) : g[i];
        ga[sa ? 0 : i] += d;
      }
    }
    if (t.needs_grad(ib)) {
      Tensor& gb = t.grad_ref(ib);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double d = kind == 0 ? g[i] : kind == 1 ? -g[i] : g[i] * (sa ? xa[0] : xa[i]);
        gb[sb ? 0 : i] += d;
      }
    }
  });
}

}  // namespace

Var add(const Var& a, const Var& b) { return binary(a, b, 0, "add"); }
Var sub(const Var& a, const Var& b) { return binary(a, b, 1, "sub"); }
Var mul(const Var& a, const Var& b) { return binary(a, b, 2, "elementwise_mul"); }

Var scale(const Var& a, double s) {
  Tape& t = a.tape();
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia}, [ia, s](Tape& t, std::size_t self) {
    accumulate(t.grad_ref(ia), t.out_grad(self), s);
  });
}

Var add_scalar(const Var& a, double s) {
  Tape& t = a.tape();
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += s;
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia}, [ia](Tape& t, std::size_t self) {
    accumulate(t.grad_ref(ia), t.out_grad(self));
  });
}

Var add_bias(const Var& a, const Var& bias) {
  Tape& t = same_tape(a, bias);
  const Tensor& x = a.value();
  const Tensor& b = bias.value();
  if (x.rank() != 2 || b.rank() != 1 || b.dim(0) != x.dim(1)) {
    shape_mismatch("add_bias", x.shape(), b.shape());
  }
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor out = x;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += b[c];
  const std::size_t ia = a.id(), ib = bias.id();
  return t.record(std::move(out), {ia, ib}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    if (t.needs_grad(ia)) accumulate(t.grad_ref(ia), g);
    if (t.needs_grad(ib)) {
      Tensor& gb = t.grad_ref(ib);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
    }
  });
}

Var leaky_relu(const Var& a, double slope) {
  Tape& t = a.tape();
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out[i] < 0.0) out[i] *= slope;
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia}, [ia, slope](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    const Tensor& x = t.value(ia);
    Tensor& gx = t.grad_ref(ia);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += x[i] < 0.0 ? slope * g[i] : g[i];
  });
}

Var softmax(const Var& a, std::size_t axis) {
  Tape& t = a.tape();
  const AxisView v = axis_view(a.value().shape(), axis);
  const std::size_t ia = a.id();
  return t.record(kernels::softmax(a.value(), axis), {ia}, [ia, v](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_ref(ia);
    std::vector<double> s(v.inner);
    for (std::size_t o = 0; o < v.outer; ++o) {
      const std::size_t base = o * v.length * v.inner;
      std::fill(s.begin(), s.end(), 0.0);
      for (std::size_t l = 0; l < v.length; ++l) {
        const std::size_t r = base + l * v.inner;
        for (std::size_t in = 0; in < v.inner; ++in) s[in] += g[r + in] * y[r + in];
      }
      for (std::size_t l = 0; l < v.length; ++l) {
        const std::size_t r = base + l * v.inner;
        for (std::size_t in = 0; in < v.inner; ++in) {
          gx[r + in] += y[r + in] * (g[r + in] - s[in]);
        }
      }
    }
  });
}

Var log_softmax(const Var& a, std::size_t axis) {
  Tape& t = a.tape();
  const AxisView v = axis_view(a.value().shape(), axis);
  const std::size_t ia = a.id();
  return t.record(kernels::log_softmax(a.value(), axis), {ia}, [ia, v](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_ref(ia);
    std::vector<double> s(v.inner);
    for (std::size_t o = 0; o < v.outer; ++o) {
      const std::size_t base = o * v.length * v.inner;
      std::fill(s.begin(), s.end(), 0.0);
      for (std::size_t l = 0; l < v.length; ++l) {
        const std::size_t r = base + l * v.inner;
        for (std::size_t in = 0; in < v.inner; ++in) s[in] += g[r + in];
      }
      for (std::size_t l = 0; l < v.length; ++l) {
        const std::size_t r = base + l * v.inner;
        for (std::size_t in = 0; in < v.inner; ++in) {
          gx[r + in] += g[r + in] - std::exp(y[r + in]) * s[in];
        }
      }
    }
  });
}

Var layer_norm(const Var& a, std::size_t axis, const Var& gain, const Var& bias, double eps) {
  Tape& t = same_tape(a, gain);
  same_tape(a, bias);
  const Tensor& x = a.value();
  const AxisView v = axis_view(x.shape(), axis);
  const Shape want{v.length};
  if (gain.value().shape() != want) shape_mismatch("layer_norm gain", want, gain.value().shape());
  if (bias.value().shape() != want) shape_mismatch("layer_norm bias", want, bias.value().shape());
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();

  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_sigma(v.outer * v.inner);
  const double n = static_cast<double>(v.length);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.length * v.inner + in;
      double mu = 0.0;
      for (std::size_t l = 0; l < v.length; ++l) mu += x[base + l * v.inner];
      mu /= n;
      double var = 0.0;
      for (std::size_t l = 0; l < v.length; ++l) {
        const double d = x[base + l * v.inner] - mu;
        var += d * d;
      }
      var /= n;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_sigma[o * v.inner + in] = is;
      for (std::size_t l = 0; l < v.length; ++l) {
        const std::size_t i = base + l * v.inner;
        xhat[i] = (x[i] - mu) * is;
        out[i] = xhat[i] * gv[l] + bv[l];
      }
    }
  }
  const std::size_t ia = a.id(), ig = gain.id(), ib = bias.id();
  return t.record(std::move(out), {ia, ig, ib},
                  [=, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    const Tensor& gv = t.value(ig);
    const bool need_x = t.needs_grad(ia);
    const bool need_g = t.needs_grad(ig);
    const bool need_b = t.needs_grad(ib);
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = o * v.length * v.inner + in;
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t l = 0; l < v.length; ++l) {
          const std::size_t i = base + l * v.inner;
          const double dxh = g[i] * gv[l];
          m1 += dxh;
          m2 += dxh * xhat[i];
          if (need_g) t.grad_ref(ig)[l] += g[i] * xhat[i];
          if (need_b) t.grad_ref(ib)[l] += g[i];
        }
        if (!need_x) continue;
        m1 /= n;
        m2 /= n;
        const double is = inv_sigma[o * v.inner + in];
        Tensor& gx = t.grad_ref(ia);
        for (std::size_t l = 0; l < v.length; ++l) {
          const std::size_t i = base + l * v.inner;
          gx[i] += is * (g[i] * gv[l] - m1 - xhat[i] * m2);
        }
      }
    }
  });
}

Var reduce_max(const Var& a, std::size_t axis) {
  Tape& t = a.tape();
  const Tensor& x = a.value();
  const AxisView v = axis_view(x.shape(), axis);
  if (v.length == 0) fail(ErrorCode::ShapeMismatch, "reduce_max over empty axis");
  Tensor out(drop_axis(x.shape(), axis));
  std::vector<std::size_t> arg(out.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.length * v.inner + in;
      std::size_t best = base;
      for (std::size_t l = 1; l < v.length; ++l) {
        const std::size_t i = base + l * v.inner;
        if (x[i] > x[best]) best = i;
      }
      out[o * v.inner + in] = x[best];
      arg[o * v.inner + in] = best;
    }
  }
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia}, [ia, arg = std::move(arg)](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    Tensor& gx = t.grad_ref(ia);
    for (std::size_t r = 0; r < arg.size(); ++r) gx[arg[r]] += g[r];
  });
}

Var reduce_mean(const Var& a, std::size_t axis) {
  Tape& t = a.tape();
  const Tensor& x = a.value();
  const AxisView v = axis_view(x.shape(), axis);
  if (v.length == 0) fail(ErrorCode::ShapeMismatch, "reduce_mean over empty axis");
  Tensor out(drop_axis(x.shape(), axis));
  const double inv = 1.0 / static_cast<double>(v.length);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.length * v.inner + in;
      double s = 0.0;
      for (std::size_t l = 0; l < v.length; ++l) s += x[base + l * v.inner];
      out[o * v.inner + in] = s * inv;
    }
  }
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia}, [ia, v, inv](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    Tensor& gx = t.grad_ref(ia);
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t in = 0; in < v.inner; ++in)
        for (std::size_t l = 0; l < v.length; ++l)
          gx[o * v.length * v.inner + l * v.inner + in] += g[o * v.inner + in] * inv;
  });
}

Var sum(const Var& a) {
  Tape& t = a.tape();
  double s = 0.0;
  for (double x : a.value().values()) s += x;
  const std::size_t ia = a.id();
  return t.record(Tensor::scalar(s), {ia}, [ia](Tape& t, std::size_t self) {
    const double g = t.out_grad(self)[0];
    Tensor& gx = t.grad_ref(ia);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0.0) fail(ErrorCode::ShapeMismatch, "mean of empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) fail(ErrorCode::ShapeMismatch, "concat of zero tensors");
  Tape& t = parts[0].tape();
  const Shape& s0 = parts[0].value().shape();
  if (axis >= s0.size()) shape_mismatch("concat axis", s0, {axis});
  Shape out_shape = s0;
  out_shape[axis] = 0;
  std::vector<std::size_t> ids, lengths;
  for (const Var& p : parts) {
    same_tape(parts[0], p);
    const Shape& s = p.value().shape();
    if (s.size() != s0.size()) shape_mismatch("concat", s0, s);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i]) shape_mismatch("concat", s0, s);
    out_shape[axis] += s[axis];
    ids.push_back(p.id());
    lengths.push_back(s[axis]);
  }
  const AxisView v = axis_view(out_shape, axis);
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& x = parts[p].value();
    const std::size_t block = lengths[p] * v.inner;
    for (std::size_t o = 0; o < v.outer; ++o) {
      std::copy_n(x.data() + o * block, block, out.data() + o * v.length * v.inner + offset);
    }
    offset += block;
  }
  return t.record(std::move(out), ids, [ids, lengths, v](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const std::size_t block = lengths[p] * v.inner;
      if (t.needs_grad(ids[p])) {
        Tensor& gx = t.grad_ref(ids[p]);
        for (std::size_t o = 0; o < v.outer; ++o)
          for (std::size_t i = 0; i < block; ++i)
            gx[o * block + i] += g[o * v.length * v.inner + offset + i];
      }
      offset += block;
    }
  });
}

Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

Var gather_rows(const Var& a, std::span<const std::size_t> indices) {
  Tape& t = a.tape();
  const Tensor& x = a.value();
  if (x.rank() == 0) fail(ErrorCode::ShapeMismatch, "gather_rows on a scalar");
  const std::size_t rows = x.dim(0);
  const std::size_t width = rows ? x.size() / rows : 0;
  Shape shape = x.shape();
  shape[0] = indices.size();
  Tensor out(shape);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= rows) {
      fail(ErrorCode::IndexOutOfRange, "gather_rows index " + std::to_string(indices[r]) +
                                           " for " + std::to_string(rows) + " rows");
    }
    std::copy_n(x.data() + indices[r] * width, width, out.data() + r * width);
  }
  const std::size_t ia = a.id();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return t.record(std::move(out), {ia}, [ia, width, idx = std::move(idx)](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    Tensor& gx = t.grad_ref(ia);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < width; ++c) gx[idx[r] * width + c] += g[r * width + c];
  });
}

Var reshape(const Var& a, Shape shape) {
  Tape& t = a.tape();
  const std::size_t ia = a.id();
  return t.record(a.value().reshaped(std::move(shape)), {ia}, [ia](Tape& t, std::size_t self) {
    accumulate(t.grad_ref(ia), t.out_grad(self));
  });
}

Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
  Tape& t = a.tape();
  const Tensor& x = a.value();
  const AxisView v = axis_view(x.shape(), axis);
  if (begin > end || end > v.length) {
    fail(ErrorCode::ShapeMismatch, "slice [" + std::to_string(begin) + ", " +
                                       std::to_string(end) + ") of " + shape_string(x.shape()));
  }
  Shape shape = x.shape();
  shape[axis] = end - begin;
  Tensor out(shape);
  const std::size_t block = (end - begin) * v.inner;
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(x.data() + o * v.length * v.inner + begin * v.inner, block,
                out.data() + o * block);
  }
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    Tensor& gx = t.grad_ref(ia);
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < block; ++i)
        gx[o * v.length * v.inner + begin * v.inner + i] += g[o * block + i];
  });
}

Var pick(const Var& a, std::span<const std::size_t> cols) {
  Tape& t = a.tape();
  const Tensor& x = a.value();
  if (x.rank() != 2 || x.dim(0) != cols.size()) shape_mismatch("pick", x.shape(), {cols.size()});
  const std::size_t m = x.dim(1);
  Tensor out({cols.size()});
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] >= m) fail(ErrorCode::IndexOutOfRange, "pick column " + std::to_string(cols[i]));
    out[i] = x[i * m + cols[i]];
  }
  const std::size_t ia = a.id();
  std::vector<std::size_t> c(cols.begin(), cols.end());
  return t.record(std::move(out), {ia}, [ia, m, c = std::move(c)](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    Tensor& gx = t.grad_ref(ia);
    for (std::size_t i = 0; i < c.size(); ++i) gx[i * m + c[i]] += g[i];
  });
}

double huber(double a, double delta) {
  const double m = std::abs(a);
  return m <= delta ? 0.5 * a * a : delta * (m - 0.5 * delta);
}

Var huber_loss(const Var& pred, const Var& target, double delta) {
  Tape& t = same_tape(pred, target);
  const Tensor& p = pred.value();
  const Tensor& y = target.value();
  if (p.shape() != y.shape()) shape_mismatch("huber_loss", p.shape(), y.shape());
  if (!(delta > 0.0)) fail(ErrorCode::InvalidArgument, "huber delta must be positive");
  if (p.size() == 0) fail(ErrorCode::ShapeMismatch, "huber_loss of empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += huber(p[i] - y[i], delta);
  const double inv = 1.0 / static_cast<double>(p.size());
  const std::size_t ip = pred.id(), iy = target.id();
  return t.record(Tensor::scalar(s * inv), {ip, iy}, [=](Tape& t, std::size_t self) {
    const double g = t.out_grad(self)[0] * inv;
    const Tensor& p = t.value(ip);
    const Tensor& y = t.value(iy);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double a = p[i] - y[i];
      const double d = std::abs(a) <= delta ? a : (a > 0.0 ? delta : -delta);
      if (t.needs_grad(ip)) t.grad_ref(ip)[i] += g * d;
      if (t.needs_grad(iy)) t.grad_ref(iy)[i] -= g * d;
    }
  });
}

Var edge_conv_max(const Var& center, const Var& neighbor, const Var& bias,
                  std::span<const std::size_t> nbr, std::size_t k, double slope) {
  Tape& t = same_tape(center, neighbor);
  same_tape(center, bias);
  const Tensor& a = center.value();
  const Tensor& b = neighbor.value();
  const Tensor& c = bias.value();
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    shape_mismatch("edge_conv_max", a.shape(), b.shape());
  }
  const std::size_t n = a.dim(0), ch = a.dim(1), m = b.dim(0);
  if (c.shape() != Shape{ch}) shape_mismatch("edge_conv_max bias", {ch}, c.shape());
  if (k == 0 || nbr.size() != n * k) {
    fail(ErrorCode::ShapeMismatch, "edge_conv_max neighbor table has " +
                                       std::to_string(nbr.size()) + " entries for " +
                                       std::to_string(n) + "x" + std::to_string(k));
  }
  for (std::size_t j : nbr)
    if (j >= m) fail(ErrorCode::IndexOutOfRange, "neighbor index " + std::to_string(j));

  Tensor out({n, ch});
  std::vector<std::size_t> arg(n * ch);  // winning neighbor row
  std::vector<double> pre(n * ch);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t q = 0; q < ch; ++q) {
      double best = -INFINITY;
      std::size_t who = 0;
      const double base = a[i * ch + q];
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t r = nbr[i * k + j];
        const double z = base + b[r * ch + q] + c[q];
        if (z > best) {
          best = z;
          who = r;
        }
      }
      pre[i * ch + q] = best;
      arg[i * ch + q] = who;
      out[i * ch + q] = best < 0.0 ? slope * best : best;
    }
  }
  const std::size_t ia = center.id(), ib = neighbor.id(), ic = bias.id();
  return t.record(std::move(out), {ia, ib, ic},
                  [=, arg = std::move(arg), pre = std::move(pre)](Tape& t, std::size_t self) {
    const Tensor& g = t.out_grad(self);
    const bool na = t.needs_grad(ia), nb = t.needs_grad(ib), nc = t.needs_grad(ic);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t q = 0; q < ch; ++q) {
        const std::size_t e = i * ch + q;
        const double dz = pre[e] < 0.0 ? slope * g[e] : g[e];
        if (na) t.grad_ref(ia)[e] += dz;
        if (nb) t.grad_ref(ib)[arg[e] * ch + q] += dz;
        if (nc) t.grad_ref(ic)[q] += dz;
      }
    }
  });
}

// ---- finite differences ------------------------------------------------------

namespace {

double eval_scalar(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  Tape t;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& x : inputs) vars.push_back(t.constant(x));
  return f(t, vars).value().item();
}

}  // namespace

double finite_diff_check(const ScalarFn& f, const std::vector<Tensor>& inputs, double h) {
  Tape t;
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.push_back(t.variable(x));
  const Var loss = f(t, vars);
  t.backward(loss);

  double worst = 0.0;
  std::vector<Tensor> probe = inputs;
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    const Tensor& g = t.grad(vars[p]);
    for (std::size_t i = 0; i < inputs[p].size(); ++i) {
      const double x0 = inputs[p][i];
      probe[p][i] = x0 + h;
      const double fp = eval_scalar(f, probe);
      probe[p][i] = x0 - h;
      const double fm = eval_scalar(f, probe);
      probe[p][i] = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      worst = std::max(worst, std::abs(g[i] - numeric) / std::max(1.0, std::abs(g[i])));
    }
  }
  return worst;
}

double finite_diff_check(ParamStore& store, const std::function<Var(Tape&)>& f, double h,
                         std::size_t max_coords) {
  std::map<std::string, Tensor> analytic;
  {
    Tape t;
    const Var loss = f(t);
    t.backward(loss);
    for (auto& [name, g] : t.param_grads()) analytic[name] = std::move(g);
  }
  auto evaluate = [&] {
    Tape t;
    return f(t).value().item();
  };
  double worst = 0.0;
  for (auto& e : store.entries()) {
    const std::size_t n = e.value.size();
    const std::size_t stride = std::max<std::size_t>(1, n / std::max<std::size_t>(1, max_coords));
    const auto it = analytic.find(e.name);
    for (std::size_t i = 0; i < n; i += stride) {
      const double x0 = e.value[i];
      e.value[i] = x0 + h;
      const double fp = evaluate();
      e.value[i] = x0 - h;
      const double fm = evaluate();
      e.value[i] = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = it == analytic.end() ? 0.0 : it->second[i];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

}  // namespace castreg::ad
