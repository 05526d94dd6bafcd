#include <onh/strain.hpp>

namespace onh {

Mat3 StrainField::tensor(Eigen::Index node) const {
  const auto t = tensors.col(node);
  Mat3 e;
  e << t(0), t(3), t(4),
       t(3), t(1), t(5),
       t(4), t(5), t(2);
  return e;
}

void StrainField::validate() const {
  if (tensors.cols() != grid.count() || effective.size() != grid.count())
    throw Error("strain field size mismatch");
  if (!tensors.allFinite() || !effective.allFinite()) throw Error("non-finite strain");
  if ((effective.array() < 0.0).any()) throw Error("negative effective strain");
}

StrainField strain_tensor(const DisplacementField& input, double min_confidence) {
  const auto& g = input.grid;
  for (int d : g.dims)
    if (d < 3) throw Error("strain_tensor needs >= 3 nodes per axis");
  input.validate();
  const DisplacementField field = fill_unreliable(input, min_confidence);

  // Node step per axis in mm; displacement converted from voxels to mm.
  const Vec3 step = g.stride * g.spacing;
  const Eigen::Matrix3Xd u_mm = g.spacing.asDiagonal() * field.vectors;

  StrainField out;
  out.grid = g;
  out.tensors.resize(6, g.count());
  out.effective.resize(g.count());

  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const int idx[3] = {i, j, k};
        Mat3 grad;  // grad(r, c) = d u_r / d x_c
        for (int c = 0; c < 3; ++c) {
          int lo[3] = {i, j, k}, hi[3] = {i, j, k};
          if (idx[c] > 0) lo[c] -= 1;
          if (idx[c] < g.dims[c] - 1) hi[c] += 1;
          const double h = (hi[c] - lo[c]) * step[c];
          grad.col(c) = (u_mm.col(g.index(hi[0], hi[1], hi[2])) -
                         u_mm.col(g.index(lo[0], lo[1], lo[2]))) / h;
        }
        const Mat3 eps = 0.5 * (grad + grad.transpose());
        const Eigen::Index n = g.index(i, j, k);
        out.tensors.col(n) << eps(0, 0), eps(1, 1), eps(2, 2), eps(0, 1), eps(0, 2), eps(1, 2);
        out.effective(n) = effective_strain(eps);
      }
  return out;
}

OnhPointCloud attach_strain(const OnhPointCloud& cloud, const StrainField& strain, int k,
                            const RigidTransform& to_cloud_frame) {
  if (strain.grid.count() == 0 || strain.effective.size() == 0)
    throw Error("strain field is empty");
  const Eigen::Matrix3Xd nodes =
      (to_cloud_frame.linear() * strain.grid.positions_mm()).colwise() + to_cloud_frame.translation();
  OnhPointCloud out = cloud;
  out.strain = knn_interpolate(cloud.points, nodes, strain.effective, k);
  return out;
}

}  // namespace onh
