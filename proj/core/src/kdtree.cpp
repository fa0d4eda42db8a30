#include "castreg/kdtree.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace castreg {

namespace {

constexpr std::size_t kLeafSize = 8;

using Candidate = std::pair<double, std::size_t>;  // (squared distance, index)

}  // namespace

KdTree::KdTree(std::vector<Vec3> points) : points_(std::move(points)) {
  if (points_.empty()) fail(ErrorCode::InvalidArgument, "KdTree over empty set");
  order_.resize(points_.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  nodes_.reserve(2 * points_.size() / kLeafSize + 2);
  build(0, points_.size());
}

std::size_t KdTree::build(std::size_t begin, std::size_t end) {
  const std::size_t id = nodes_.size();
  nodes_.push_back({begin, end, -1, 0.0, 0, 0});
  if (end - begin <= kLeafSize) return id;

  Vec3 lo = points_[order_[begin]];
  Vec3 hi = lo;
  for (std::size_t i = begin; i < end; ++i) {
    lo = lo.cwiseMin(points_[order_[i]]);
    hi = hi.cwiseMax(points_[order_[i]]);
  }
  int axis = 0;
  (hi - lo).maxCoeff(&axis);
  if (hi[axis] == lo[axis]) return id;  // all points coincide

  const std::size_t mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                   order_.begin() + static_cast<std::ptrdiff_t>(mid),
                   order_.begin() + static_cast<std::ptrdiff_t>(end),
                   [&](std::size_t a, std::size_t b) {
                     return points_[a][axis] < points_[b][axis];
                   });
  const double split = points_[order_[mid]][axis];
  const std::size_t left = build(begin, mid);
  const std::size_t right = build(mid, end);
  Node& node = nodes_[id];
  node.axis = axis;
  node.split = split;
  node.left = left;
  node.right = right;
  return id;
}

// `heap` is a max-heap on (distance, index) holding at most k candidates.
void KdTree::search(std::size_t node_id, const Vec3& q, std::size_t k,
                    std::vector<Candidate>& heap) const {
  const Node& node = nodes_[node_id];
  if (node.axis < 0) {
    for (std::size_t i = node.begin; i < node.end; ++i) {
      const std::size_t idx = order_[i];
      const Candidate c{(points_[idx] - q).squaredNorm(), idx};
      if (heap.size() < k) {
        heap.push_back(c);
        std::push_heap(heap.begin(), heap.end());
      } else if (c < heap.front()) {
        std::pop_heap(heap.begin(), heap.end());
        heap.back() = c;
        std::push_heap(heap.begin(), heap.end());
      }
    }
    return;
  }
  const double diff = q[node.axis] - node.split;
  // Points equal to the split value can sit on either side.
  const std::size_t near = diff < 0.0 ? node.left : node.right;
  const std::size_t far = diff < 0.0 ? node.right : node.left;
  search(near, q, k, heap);
  if (heap.size() < k || diff * diff <= heap.front().first) {
    search(far, q, k, heap);
  }
}

Neighbor KdTree::nearest(const Vec3& query) const {
  return k_nearest(query, 1).front();
}

std::vector<Neighbor> KdTree::k_nearest(const Vec3& query, std::size_t k) const {
  if (k == 0 || k > points_.size()) {
    fail(ErrorCode::InvalidArgument, "k_nearest with k=" + std::to_string(k) +
                                         " on " + std::to_string(points_.size()) +
                                         " points");
  }
  std::vector<Candidate> heap;
  heap.reserve(k + 1);
  search(0, query, k, heap);
  std::sort_heap(heap.begin(), heap.end());
  std::vector<Neighbor> out;
  out.reserve(heap.size());
  for (const auto& [d2, idx] : heap) out.push_back({idx, std::sqrt(d2)});
  return out;
}

Neighbor nearest_neighbor(const KdTree& tree, const Vec3& query) {
  return tree.nearest(query);
}

std::vector<Neighbor> k_nearest(const KdTree& tree, const Vec3& query,
                                std::size_t k) {
  return tree.k_nearest(query, k);
}

double median_spacing(const KdTree& tree) {
  if (tree.size() < 2) return 0.0;
  std::vector<double> d;
  d.reserve(tree.size());
  for (const auto& p : tree.points()) d.push_back(tree.k_nearest(p, 2)[1].distance);
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return *mid;
}

}  // namespace castreg
