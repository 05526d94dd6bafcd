#pragma once

#include <Eigen/Eigenvalues>

namespace onh {

template <typename Derived>
BmoPlane fit_bmo_plane(const Eigen::MatrixBase<Derived>& points) {
  static_assert(Derived::RowsAtCompileTime == 3 || Derived::RowsAtCompileTime == Eigen::Dynamic,
                "points must be 3 x N");
  using Scalar = typename Derived::Scalar;
  if (points.rows() != 3 || points.cols() < 3) throw Error("degenerate BMO ring");

  const Eigen::Matrix<Scalar, 3, 1> centroid = points.rowwise().mean();
  const Eigen::Matrix<Scalar, 3, Eigen::Dynamic> centered = points.colwise() - centroid;
  const Eigen::Matrix<Scalar, 3, 3> scatter = centered * centered.transpose();

  // Eigenvalues come back ascending; the first eigenvector is the normal.
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<Scalar, 3, 3>> eig(scatter);
  const auto& lambda = eig.eigenvalues();
  if (!(lambda(2) > Scalar(0)) || lambda(1) <= Scalar(1e-12) * lambda(2))
    throw Error("degenerate BMO ring");

  Eigen::Matrix<Scalar, 3, 1> n = eig.eigenvectors().col(0).normalized();
  if (n.z() < Scalar(0)) n = -n;

  BmoPlane plane;
  plane.center = centroid.template cast<double>();
  plane.normal = n.template cast<double>();
  return plane;
}

}  // namespace onh
