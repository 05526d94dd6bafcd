#include <onh/knn.hpp>

#include <algorithm>
#include <limits>
#include <numeric>

namespace onh {

namespace {
constexpr int kLeafSize = 12;

inline double dist2(const Eigen::Matrix3Xd& pts, Eigen::Index i, const Vec3& q) {
  const double dx = pts(0, i) - q.x();
  const double dy = pts(1, i) - q.y();
  const double dz = pts(2, i) - q.z();
  return dx * dx + dy * dy + dz * dz;
}
}  // namespace

KdTree::KdTree(Eigen::Matrix3Xd points) : points_(std::move(points)) {
  order_.resize(static_cast<std::size_t>(points_.cols()));
  std::iota(order_.begin(), order_.end(), Eigen::Index{0});
  if (!order_.empty()) {
    nodes_.reserve(2 * order_.size() / kLeafSize + 2);
    build(0, static_cast<std::int32_t>(order_.size()));
  }
}

std::int32_t KdTree::build(std::int32_t begin, std::int32_t end) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back({});
  nodes_[id].begin = begin;
  nodes_[id].end = end;
  if (end - begin <= kLeafSize) return id;

  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (auto i = begin; i < end; ++i) {
    const Vec3 p = points_.col(order_[static_cast<std::size_t>(i)]);
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  int axis;
  (hi - lo).maxCoeff(&axis);
  if (hi[axis] == lo[axis]) return id;  // all coincident

  const auto mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](Eigen::Index a, Eigen::Index b) {
                     return points_(axis, a) < points_(axis, b);
                   });
  const double split = points_(axis, order_[static_cast<std::size_t>(mid)]);
  const auto left = build(begin, mid);
  const auto right = build(mid, end);
  nodes_[id].axis = axis;
  nodes_[id].split = split;
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

void KdTree::search(std::int32_t id, const Vec3& q, std::size_t k,
                    std::vector<Neighbor>& heap) const {
  const Node& node = nodes_[static_cast<std::size_t>(id)];
  if (node.axis < 0) {
    for (auto i = node.begin; i < node.end; ++i) {
      const Neighbor cand{dist2(points_, order_[static_cast<std::size_t>(i)], q),
                          order_[static_cast<std::size_t>(i)]};
      if (heap.size() < k) {
        heap.push_back(cand);
        std::push_heap(heap.begin(), heap.end());
      } else if (cand < heap.front()) {
        std::pop_heap(heap.begin(), heap.end());
        heap.back() = cand;
        std::push_heap(heap.begin(), heap.end());
      }
    }
    return;
  }
  // Left holds coordinates <= split, right >= split.
  const double diff = q[node.axis] - node.split;
  const auto near = diff <= 0.0 ? node.left : node.right;
  const auto far = diff <= 0.0 ? node.right : node.left;
  search(near, q, k, heap);
  if (heap.size() < k || diff * diff <= heap.front().dist2) search(far, q, k, heap);
}

std::vector<KdTree::Neighbor> KdTree::nearest(const Vec3& q, int k) const {
  std::vector<Neighbor> heap;
  if (k < 1 || order_.empty()) return heap;
  const auto kk = std::min<std::size_t>(static_cast<std::size_t>(k), order_.size());
  heap.reserve(kk + 1);
  search(0, q, kk, heap);
  std::sort_heap(heap.begin(), heap.end());
  return heap;
}

double KdTree::nearest_dist2(const Vec3& q) const {
  const auto nn = nearest(q, 1);
  if (nn.empty()) throw Error("nearest neighbour query on an empty tree");
  return nn.front().dist2;
}

Eigen::VectorXd knn_interpolate(const Eigen::Matrix3Xd& query, const KdTree& tree,
                                const Eigen::VectorXd& values, int k) {
  if (tree.size() == 0) throw Error("knn_interpolate needs at least one sample");
  if (k < 1) throw Error("knn_interpolate needs k >= 1");
  if (values.size() != tree.size()) throw Error("sample/value count mismatch");
  Eigen::VectorXd out(query.cols());
  for (Eigen::Index i = 0; i < query.cols(); ++i) {
    const auto nn = tree.nearest(query.col(i), k);
    double sum = 0.0;
    for (const auto& n : nn) sum += values(n.index);
    out(i) = sum / static_cast<double>(nn.size());
  }
  return out;
}

Eigen::VectorXd knn_interpolate(const Eigen::Matrix3Xd& query,
                                const Eigen::Matrix3Xd& samples,
                                const Eigen::VectorXd& values, int k) {
  if (samples.cols() == 0) throw Error("knn_interpolate needs at least one sample");
  return knn_interpolate(query, KdTree(samples), values, k);
}

}  // namespace onh
