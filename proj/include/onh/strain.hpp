#pragma once

#include <onh/common.hpp>
#include <onh/dvc.hpp>
#include <onh/geometry.hpp>
#include <onh/knn.hpp>

#include <Eigen/Core>

#include <cmath>

namespace onh {

/// Infinitesimal strain per node; tensors are stored as
/// (xx, yy, zz, xy, xz, yz).
struct StrainField {
  NodeGrid grid;
  Eigen::Matrix<double, 6, Eigen::Dynamic> tensors;
  Eigen::VectorXd effective;

  Mat3 tensor(Eigen::Index node) const;
  void validate() const;
};

/// Von Mises equivalent strain sqrt(2/3 e_dev : e_dev). The deviatoric norm
/// is formed from differences of the normal components, so a hydrostatic
/// tensor gives exactly zero.
template <typename Derived>
typename Derived::Scalar effective_strain(const Eigen::MatrixBase<Derived>& eps) {
  using Scalar = typename Derived::Scalar;
  const Scalar a = eps(0, 0), b = eps(1, 1), c = eps(2, 2);
  const Scalar normal = ((a - b) * (a - b) + (b - c) * (b - c) + (c - a) * (c - a)) / Scalar(3);
  const Scalar shear = eps(0, 1) * eps(0, 1) + eps(1, 0) * eps(1, 0) + eps(0, 2) * eps(0, 2) +
                       eps(2, 0) * eps(2, 0) + eps(1, 2) * eps(1, 2) + eps(2, 1) * eps(2, 1);
  return std::sqrt(Scalar(2) / Scalar(3) * (normal + shear));
}

/// Central differences of the displacement (one-sided at the lattice edge) in
/// physical units; nodes below `min_confidence` are filled from neighbours
/// before differencing.
StrainField strain_tensor(const DisplacementField& field, double min_confidence = 0.3);

/// Effective strain at every cloud point as the KNN mean over node centres.
/// `to_cloud_frame` maps node positions (mm, volume frame) into the cloud's frame.
OnhPointCloud attach_strain(const OnhPointCloud& cloud, const StrainField& strain,
                            int k = kDefaultKnnK,
                            const RigidTransform& to_cloud_frame = RigidTransform::Identity());

}  // namespace onh
