#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "castreg/geometry.hpp"

namespace castreg {

struct Neighbor {
  std::size_t index = 0;
  double distance = 0.0;
};

// Immutable 3-D k-d tree. Queries are exact; equal distances are ordered by
// ascending point index. Const member functions are safe to call from many
// threads at once.
class KdTree {
 public:
  explicit KdTree(std::vector<Vec3> points);
  explicit KdTree(const PointCloud& cloud) : KdTree(cloud.points()) {}

  std::size_t size() const noexcept { return points_.size(); }
  const std::vector<Vec3>& points() const noexcept { return points_; }

  Neighbor nearest(const Vec3& query) const;
  std::vector<Neighbor> k_nearest(const Vec3& query, std::size_t k) const;

 private:
  struct Node {
    std::size_t begin = 0;  // range into order_
    std::size_t end = 0;
    int axis = -1;          // -1 marks a leaf
    double split = 0.0;
    std::size_t left = 0;
    std::size_t right = 0;
  };

  std::size_t build(std::size_t begin, std::size_t end);
  void search(std::size_t node, const Vec3& q, std::size_t k,
              std::vector<std::pair<double, std::size_t>>& heap) const;

  std::vector<Vec3> points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

Neighbor nearest_neighbor(const KdTree& tree, const Vec3& query);
std::vector<Neighbor> k_nearest(const KdTree& tree, const Vec3& query,
                                std::size_t k);

// Median distance from each point to its closest other point.
double median_spacing(const KdTree& tree);

}  // namespace castreg
