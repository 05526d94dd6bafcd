#include <onh/knn.hpp>

#include <doctest.h>

#include <algorithm>

using namespace onh;

namespace {

Eigen::Matrix3Xd random_points(Rng& rng, Eigen::Index n, int grid = 0) {
  Eigen::Matrix3Xd p(3, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a)
      // Integer lattices produce many exact distance ties.
      p(a, i) = grid > 0 ? static_cast<double>(uniform_index(rng, static_cast<std::uint64_t>(grid)))
                         : uniform(rng, -1.0, 1.0);
  return p;
}

// Exhaustive k-nearest mean: sort all (d2, index) pairs, sum the first k
// values in ascending order, then divide.
Eigen::VectorXd brute_force(const Eigen::Matrix3Xd& q, const Eigen::Matrix3Xd& s,
                            const Eigen::VectorXd& v, int k) {
  Eigen::VectorXd out(q.cols());
  for (Eigen::Index i = 0; i < q.cols(); ++i) {
    std::vector<std::pair<double, Eigen::Index>> all;
    for (Eigen::Index j = 0; j < s.cols(); ++j) all.emplace_back((s.col(j) - q.col(i)).squaredNorm(), j);
    std::sort(all.begin(), all.end());
    const auto m = std::min<std::size_t>(static_cast<std::size_t>(k), all.size());
    double sum = 0.0;
    for (std::size_t t = 0; t < m; ++t) sum += v(all[t].second);
    out(i) = sum / static_cast<double>(m);
  }
  return out;
}

}  // namespace

TEST_CASE("knn of a constant field is that constant") {
  Rng rng(1);
  const auto s = random_points(rng, 100), q = random_points(rng, 30);
  const auto out = knn_interpolate(q, s, Eigen::VectorXd::Constant(100, 0.0123));
  for (Eigen::Index i = 0; i < out.size(); ++i) CHECK(out(i) == doctest::Approx(0.0123).epsilon(1e-15));
}

TEST_CASE("knn matches the exhaustive oracle exactly, ties included") {
  CHECK(kDefaultKnnK == 5);
  Rng rng(2);
  for (int grid : {0, 4}) {
    const auto s = random_points(rng, 200, grid), q = random_points(rng, 50, grid);
    Eigen::VectorXd v(200);
    for (auto& x : v) x = uniform(rng, 0.0, 1.0);
    for (int k : {1, 5, 12}) CHECK(knn_interpolate(q, s, v, k) == brute_force(q, s, v, k));
  }
}

TEST_CASE("knn uses all samples when fewer than k exist") {
  Eigen::Matrix3Xd s(3, 3);
  s << 0, 1, 2, 0, 0, 0, 0, 0, 0;
  const Eigen::Vector3d v(1, 2, 6);
  Eigen::Matrix3Xd q = Eigen::Matrix3Xd::Zero(3, 1);
  CHECK(knn_interpolate(q, s, v, 5)(0) == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("knn output lies within the range of the sample values") {
  Rng rng(3);
  const auto s = random_points(rng, 300), q = random_points(rng, 100);
  Eigen::VectorXd v(300);
  for (auto& x : v) x = uniform(rng, -2.0, 3.0);
  const auto out = knn_interpolate(q, s, v);
  CHECK(out.minCoeff() >= v.minCoeff());
  CHECK(out.maxCoeff() <= v.maxCoeff());
}

TEST_CASE("knn errors and nearest_dist2") {
  const Eigen::Matrix3Xd none(3, 0);
  const Eigen::Matrix3Xd q = Eigen::Matrix3Xd::Zero(3, 1);
  CHECK_THROWS_AS(knn_interpolate(q, none, Eigen::VectorXd(0)), Error);
  Eigen::Matrix3Xd s = Eigen::Matrix3Xd::Identity(3, 3);
  CHECK_THROWS_AS(knn_interpolate(q, s, Eigen::VectorXd::Zero(2)), Error);
  CHECK_THROWS_AS(knn_interpolate(q, s, Eigen::VectorXd::Zero(3), 0), Error);

  Rng rng(4);
  const auto pts = random_points(rng, 500);
  const KdTree tree(pts);
  for (int t = 0; t < 50; ++t) {
    const Vec3 p(uniform(rng, -1.5, 1.5), uniform(rng, -1.5, 1.5), uniform(rng, -1.5, 1.5));
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < pts.cols(); ++j) {
      const double dx = pts(0, j) - p.x(), dy = pts(1, j) - p.y(), dz = pts(2, j) - p.z();
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    CHECK(tree.nearest_dist2(p) == best);
  }
  CHECK_THROWS_AS(KdTree().nearest_dist2(Vec3::Zero()), Error);
}
