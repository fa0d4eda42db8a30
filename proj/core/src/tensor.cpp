#include "castreg/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace castreg::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

struct ProbeState {
  int depth = 0;
  std::size_t largest = 0;
  std::size_t count = 0;
};

thread_local ProbeState probe_state;

void require_matrix(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) shape_mismatch(op, a.shape(), b.shape());
}

MapC view(const Tensor& t) {
  return MapC(t.data(), static_cast<Eigen::Index>(t.dim(0)),
              static_cast<Eigen::Index>(t.dim(1)));
}

Map view(Tensor& t) {
  return Map(t.data(), static_cast<Eigen::Index>(t.dim(0)),
             static_cast<Eigen::Index>(t.dim(1)));
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  if (shape_.size() > 3) {
    fail(ErrorCode::ShapeMismatch, "tensor rank > 3: " + shape_string(shape_));
  }
  data_.assign(shape_size(shape_), fill);
  AllocationProbe::record(data_.size());
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (shape_.size() > 3) {
    fail(ErrorCode::ShapeMismatch, "tensor rank > 3: " + shape_string(shape_));
  }
  if (data_.size() != shape_size(shape_)) {
    fail(ErrorCode::ShapeMismatch, "tensor data has " + std::to_string(data_.size()) +
                                       " values for shape " + shape_string(shape_));
  }
  AllocationProbe::record(data_.size());
}

double Tensor::item() const {
  if (data_.size() != 1) {
    fail(ErrorCode::ShapeMismatch, "item() on shape " + shape_string(shape_));
  }
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) shape_mismatch("reshape", shape_, shape);
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

AllocationProbe::AllocationProbe() {
  if (probe_state.depth++ == 0) {
    probe_state.largest = 0;
    probe_state.count = 0;
  }
}

AllocationProbe::~AllocationProbe() { --probe_state.depth; }

std::size_t AllocationProbe::largest() const { return probe_state.largest; }
std::size_t AllocationProbe::count() const { return probe_state.count; }

void AllocationProbe::record(std::size_t elements) {
  if (probe_state.depth == 0) return;
  probe_state.largest = std::max(probe_state.largest, elements);
  ++probe_state.count;
}

AxisView axis_view(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    fail(ErrorCode::ShapeMismatch,
         "axis " + std::to_string(axis) + " out of range for " + shape_string(shape));
  }
  AxisView v{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

void shape_mismatch(const std::string& op, const Shape& a, const Shape& b) {
  fail(ErrorCode::ShapeMismatch, op + ": " + shape_string(a) + " vs " + shape_string(b));
}

namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix("matmul", a, b);
  if (a.dim(1) != b.dim(0)) shape_mismatch("matmul", a.shape(), b.shape());
  Tensor out({a.dim(0), b.dim(1)});
  view(out).noalias() = view(a) * view(b);
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix("matmul_nt", a, b);
  if (a.dim(1) != b.dim(1)) shape_mismatch("matmul_nt", a.shape(), b.shape());
  Tensor out({a.dim(0), b.dim(0)});
  view(out).noalias() = view(a) * view(b).transpose();
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix("matmul_tn", a, b);
  if (a.dim(0) != b.dim(0)) shape_mismatch("matmul_tn", a.shape(), b.shape());
  Tensor out({a.dim(1), b.dim(1)});
  view(out).noalias() = view(a).transpose() * view(b);
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) shape_mismatch("transpose", a.shape(), {});
  Tensor out({a.dim(1), a.dim(0)});
  view(out) = view(a).transpose();
  return out;
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  const AxisView v = axis_view(a.shape(), axis);
  Tensor out(a.shape());
  // Rows of `inner` contiguous values are streamed in order; each column's
  // arithmetic sequence is the same as a per-column loop.
  std::vector<double> mx(v.inner), total(v.inner);
  for (std::size_t o = 0; o < v.outer; ++o) {
    const std::size_t base = o * v.length * v.inner;
    std::fill(mx.begin(), mx.end(), -INFINITY);
    std::fill(total.begin(), total.end(), 0.0);
    for (std::size_t l = 0; l < v.length; ++l) {
      const double* row = a.data() + base + l * v.inner;
      for (std::size_t in = 0; in < v.inner; ++in) mx[in] = std::max(mx[in], row[in]);
    }
    for (std::size_t l = 0; l < v.length; ++l) {
      const double* row = a.data() + base + l * v.inner;
      double* dst = out.data() + base + l * v.inner;
      for (std::size_t in = 0; in < v.inner; ++in) {
        dst[in] = std::exp(row[in] - mx[in]);
        total[in] += dst[in];
      }
    }
    for (std::size_t l = 0; l < v.length; ++l) {
      double* dst = out.data() + base + l * v.inner;
      for (std::size_t in = 0; in < v.inner; ++in) dst[in] /= total[in];
    }
  }
  return out;
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
  const AxisView v = axis_view(a.shape(), axis);
  Tensor out(a.shape());
  std::vector<double> mx(v.inner), total(v.inner);
  for (std::size_t o = 0; o < v.outer; ++o) {
    const std::size_t base = o * v.length * v.inner;
    std::fill(mx.begin(), mx.end(), -INFINITY);
    std::fill(total.begin(), total.end(), 0.0);
    for (std::size_t l = 0; l < v.length; ++l) {
      const double* row = a.data() + base + l * v.inner;
      for (std::size_t in = 0; in < v.inner; ++in) mx[in] = std::max(mx[in], row[in]);
    }
    for (std::size_t l = 0; l < v.length; ++l) {
      const double* row = a.data() + base + l * v.inner;
      for (std::size_t in = 0; in < v.inner; ++in) total[in] += std::exp(row[in] - mx[in]);
    }
    for (std::size_t in = 0; in < v.inner; ++in) total[in] = mx[in] + std::log(total[in]);
    for (std::size_t l = 0; l < v.length; ++l) {
      const double* row = a.data() + base + l * v.inner;
      double* dst = out.data() + base + l * v.inner;
      for (std::size_t in = 0; in < v.inner; ++in) dst[in] = row[in] - total[in];
    }
  }
  return out;
}

}  // namespace kernels

}  // namespace castreg::ad
