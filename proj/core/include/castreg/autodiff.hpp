#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "castreg/tensor.hpp"

namespace castreg::ad {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
// owning tape is alive.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const;
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Named parameters with gradient and momentum buffers. Iteration order is
// insertion order, which fixes the order of every reduction over parameters.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor momentum;
  };

  Tensor& add(const std::string& name, Tensor init);
  bool contains(const std::string& name) const;
  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  const Tensor& grad(const std::string& name) const;
  void accumulate_grad(const std::string& name, const Tensor& g, double scale = 1.0);
  void zero_grad();

  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t parameter_count() const;

  // Text checkpoint: names, shapes and values at 17 significant digits.
  void save(const std::filesystem::path& path) const;
  // Loads values into existing entries; shapes must match.
  void load(const std::filesystem::path& path);
  static ParamStore read(const std::filesystem::path& path);

 private:
  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

// p <- p - lr * v with v <- momentum * v + grad.
void sgd_step(ParamStore& store, double lr, double momentum);

// Reverse-mode recorder. Nodes are appended in evaluation order, so reverse
// insertion order is a reverse topological order. Single-threaded.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  Var param(const ParamStore& store, const std::string& name);

  void backward(const Var& loss);
  const Tensor& grad(const Var& v) const;
  bool has_gradients() const noexcept { return backward_done_; }

  // Gradients of every parameter leaf, in recording order, duplicates merged.
  std::vector<std::pair<std::string, Tensor>> param_grads() const;
  void accumulate_into(ParamStore& store, double scale = 1.0) const;

  std::size_t node_count() const noexcept { return nodes_.size(); }

  // Operation plumbing.
  Var record(Tensor value, std::vector<std::size_t> parents, Backward backward);
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& out_grad(std::size_t id) const { return nodes_[id].grad; }
  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  Tensor& grad_ref(std::size_t id);
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_[id].parents; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    Backward backward;
    bool requires_grad = false;
    std::string param_name;
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ---- differentiable operations -----------------------------------------

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
// (n, c) + (c) broadcast over rows.
Var add_bias(const Var& a, const Var& bias);
Var leaky_relu(const Var& a, double slope = 0.01);
Var softmax(const Var& a, std::size_t axis);
Var log_softmax(const Var& a, std::size_t axis);
// Normalizes along `axis`; gain and bias have the axis length. eps = 1e-5.
Var layer_norm(const Var& a, std::size_t axis, const Var& gain, const Var& bias,
               double eps = 1e-5);
Var reduce_max(const Var& a, std::size_t axis);
Var reduce_mean(const Var& a, std::size_t axis);
Var sum(const Var& a);
Var mean(const Var& a);
Var concat(std::span<const Var> parts, std::size_t axis);
Var concat(std::initializer_list<Var> parts, std::size_t axis);
// Rows along axis 0; indices may repeat.
Var gather_rows(const Var& a, std::span<const std::size_t> indices);
Var reshape(const Var& a, Shape shape);
Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end);
// out[i] = a[i, cols[i]] for a of shape (n, m).
Var pick(const Var& a, std::span<const std::size_t> cols);
// Mean over elements of the Huber penalty of (pred - target).
Var huber_loss(const Var& pred, const Var& target, double delta);

// Fused edge convolution with max aggregation:
//   out[i, c] = max_j leaky(center[i, c] + neighbor[nbr[i*k + j], c] + bias[c]).
Var edge_conv_max(const Var& center, const Var& neighbor, const Var& bias,
                  std::span<const std::size_t> nbr, std::size_t k, double slope);

// Scalar Huber value for one residual.
double huber(double a, double delta);

// ---- gradient verification ------------------------------------------------

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

// Max relative error between reverse-mode and central-difference gradients of
// f with respect to each input coordinate. Denominator is max(1, |analytic|).
double finite_diff_check(const ScalarFn& f, const std::vector<Tensor>& inputs,
                         double h = 1e-6);

// Same check against the parameters of `store`, which `f` must read through
// Tape::param. At most `max_coords` coordinates per parameter are probed
// (evenly strided).
double finite_diff_check(ParamStore& store, const std::function<Var(Tape&)>& f,
                         double h = 1e-6, std::size_t max_coords = 64);

}  // namespace castreg::ad
