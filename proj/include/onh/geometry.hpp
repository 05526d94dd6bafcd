#pragma once

#include <onh/common.hpp>
#include <onh/volume.hpp>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace onh {

inline constexpr double kDefaultCropRadiusMm = 1.75;
inline constexpr int kDefaultResamplePoints = 3000;

enum class Frame { raw, bmo_aligned };

const char* to_string(Frame f);
Frame frame_from_string(const std::string& s);

/// Anterior-boundary point cloud with per-point attributes. Coordinates in mm.
struct OnhPointCloud {
  Eigen::Matrix3Xd points;
  std::vector<std::uint8_t> tissue;
  Eigen::VectorXd thickness;
  std::optional<Eigen::VectorXd> strain;
  Frame frame = Frame::raw;

  Eigen::Index size() const { return points.cols(); }
  bool has_strain() const { return strain.has_value(); }

  /// Copy of the listed points (repeats allowed), attributes carried along.
  OnhPointCloud subset(std::span<const Eigen::Index> indices) const;

  void validate() const;
};

struct BmoPlane {
  Vec3 center = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
};

using RigidTransform = Eigen::Isometry3d;

/// One point per (column, tissue class): the lowest-z voxel of that class.
/// Thickness is the exact minimum distance to the posterior boundary (the
/// highest-z voxel of the same class in any column).
OnhPointCloud extract_point_cloud(const LabeledVolume& vol);

/// Total least-squares plane through the points; normal has z >= 0.
template <typename Derived>
BmoPlane fit_bmo_plane(const Eigen::MatrixBase<Derived>& points);
BmoPlane fit_bmo_plane(const std::vector<Vec3>& points);

/// p -> R (p - center), R the minimal rotation taking normal onto +z.
RigidTransform bmo_alignment(const BmoPlane& plane);

OnhPointCloud align_to_bmo(const OnhPointCloud& cloud, const BmoPlane& plane);

/// Keeps points with sqrt(x^2 + y^2) <= radius.
OnhPointCloud cylindrical_crop(const OnhPointCloud& cloud,
                               double radius_mm = kDefaultCropRadiusMm);

/// Exactly n distinct points when the cloud has at least n, else n draws with
/// replacement. Returns the chosen indices.
std::vector<Eigen::Index> resample_indices(Eigen::Index cloud_size, int n, Rng& rng);
OnhPointCloud resample(const OnhPointCloud& cloud, int n, Rng& rng);

}  // namespace onh

#include <onh/geometry_impl.hpp>
