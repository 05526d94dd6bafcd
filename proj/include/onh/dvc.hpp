#pragma once

#include <onh/common.hpp>
#include <onh/volume.hpp>

#include <Eigen/Core>

namespace onh {

/// Regular lattice of DVC nodes. Node (i, j, k) sits at voxel coordinate
/// origin + stride * (i, j, k).
struct NodeGrid {
  Eigen::Vector3i origin = Eigen::Vector3i::Zero();
  int stride = 1;
  Dims dims{0, 0, 0};
  Vec3 spacing = Vec3::Ones();  // mm per voxel

  Eigen::Index count() const { return Eigen::Index{dims[0]} * dims[1] * dims[2]; }
  Eigen::Index index(int i, int j, int k) const {
    return i + Eigen::Index{dims[0]} * (j + Eigen::Index{dims[1]} * k);
  }
  Vec3 voxel_position(int i, int j, int k) const {
    return (origin + stride * Eigen::Vector3i(i, j, k)).cast<double>();
  }
  /// All node centres in mm, in node-index order.
  Eigen::Matrix3Xd positions_mm() const;
};

struct DisplacementField {
  NodeGrid grid;
  Eigen::Matrix3Xd vectors;      // voxels
  Eigen::VectorXd confidence;    // peak NCC

  void validate() const;
};

struct DvcConfig {
  int block = 9;   // voxels per axis
  int stride = 4;  // node spacing, voxels
  int search = 2;  // integer search radius, voxels
};

/// Normalised cross-correlation block matching. The integer peak is refined by
/// a separable quadratic fit, then by Gauss-Newton on trilinear samples of the
/// deformed volume.
DisplacementField block_match(const LabeledVolume& ref, const LabeledVolume& def,
                              const DvcConfig& cfg = {});

/// Nodes below `min_confidence` take the mean of their reliable face
/// neighbours, growing inward until every reachable node is filled.
DisplacementField fill_unreliable(const DisplacementField& field, double min_confidence = 0.3);

/// Separable Gaussian over the node lattice, truncated at 3 sigma. Boundaries
/// are point-reflected about the end nodes, which keeps affine fields exact.
/// sigma == 0 returns the input.
DisplacementField smooth_displacement(const DisplacementField& field, double sigma);

}  // namespace onh
