#pragma once

#include <onh/common.hpp>

#include <Eigen/Core>

#include <cstdint>
#include <utility>
#include <vector>

namespace onh {

inline constexpr int kDefaultKnnK = 5;

/// Static 3-D k-d tree. Neighbours are ordered by (squared distance, sample
/// index), so equidistant samples resolve to the lower index.
class KdTree {
 public:
  struct Neighbor {
    double dist2;
    Eigen::Index index;
    bool operator<(const Neighbor& o) const {
      return dist2 < o.dist2 || (dist2 == o.dist2 && index < o.index);
    }
  };

  KdTree() = default;
  explicit KdTree(Eigen::Matrix3Xd points);

  Eigen::Index size() const { return points_.cols(); }
  const Eigen::Matrix3Xd& points() const { return points_; }

  /// The min(k, size()) nearest samples, sorted ascending.
  std::vector<Neighbor> nearest(const Vec3& q, int k) const;

  /// Squared distance to the closest sample.
  double nearest_dist2(const Vec3& q) const;

 private:
  struct Node {
    // Leaf when axis < 0: [begin, end) into order_.
    int axis = -1;
    double split = 0.0;
    std::int32_t left = -1, right = -1;
    std::int32_t begin = 0, end = 0;
  };

  std::int32_t build(std::int32_t begin, std::int32_t end);
  void search(std::int32_t node, const Vec3& q, std::size_t k,
              std::vector<Neighbor>& heap) const;

  Eigen::Matrix3Xd points_;
  std::vector<Eigen::Index> order_;
  std::vector<Node> nodes_;
};

/// Mean of the scalar values carried by the k nearest samples of each query
/// point. Uses every sample when fewer than k exist.
Eigen::VectorXd knn_interpolate(const Eigen::Matrix3Xd& query,
                                const Eigen::Matrix3Xd& samples,
                                const Eigen::VectorXd& values,
                                int k = kDefaultKnnK);

/// Same as above against a prebuilt tree.
Eigen::VectorXd knn_interpolate(const Eigen::Matrix3Xd& query, const KdTree& tree,
                                const Eigen::VectorXd& values,
                                int k = kDefaultKnnK);

}  // namespace onh
