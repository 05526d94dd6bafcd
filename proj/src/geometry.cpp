#include <onh/geometry.hpp>
#include <onh/knn.hpp>

#include <array>
#include <cmath>
#include <numeric>

namespace onh {

void LabeledVolume::validate() const {
  for (int d : dims)
    if (d < 2) throw Error("volume dims must be >= 2 on every axis");
  for (int i = 0; i < 3; ++i)
    if (!(spacing[i] > 0.0) || !std::isfinite(spacing[i]))
      throw Error("volume spacing must be positive");
  const std::size_t n = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  if (labels.size() != n || intensity.size() != n) throw Error("volume buffer size mismatch");
  for (auto l : labels)
    if (l >= kTissueClasses) throw Error("label outside the tissue enumeration");
  for (float v : intensity)
    if (!std::isfinite(v)) throw Error("non-finite intensity");
}

const char* to_string(Frame f) { return f == Frame::raw ? "raw" : "bmo-aligned"; }

Frame frame_from_string(const std::string& s) {
  if (s == "raw") return Frame::raw;
  if (s == "bmo-aligned") return Frame::bmo_aligned;
  throw Error("unknown frame tag '" + s + "'");
}

OnhPointCloud OnhPointCloud::subset(std::span<const Eigen::Index> indices) const {
  OnhPointCloud out;
  const auto n = static_cast<Eigen::Index>(indices.size());
  out.points.resize(3, n);
  out.tissue.resize(indices.size());
  out.thickness.resize(n);
  if (strain) out.strain = Eigen::VectorXd(n);
  out.frame = frame;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index j = indices[static_cast<std::size_t>(i)];
    out.points.col(i) = points.col(j);
    out.tissue[static_cast<std::size_t>(i)] = tissue[static_cast<std::size_t>(j)];
    out.thickness(i) = thickness(j);
    if (strain) (*out.strain)(i) = (*strain)(j);
  }
  return out;
}

void OnhPointCloud::validate() const {
  const Eigen::Index n = size();
  if (n == 0) throw Error("point cloud is empty");
  if (static_cast<Eigen::Index>(tissue.size()) != n || thickness.size() != n)
    throw Error("point cloud attribute length mismatch");
  if (!points.allFinite()) throw Error("non-finite point coordinate");
  if (!thickness.allFinite() || (thickness.array() < 0.0).any())
    throw Error("thickness must be finite and non-negative");
  if (strain) {
    if (strain->size() != n) throw Error("strain attribute length mismatch");
    if (!strain->allFinite() || (strain->array() < 0.0).any())
      throw Error("strain must be finite and non-negative");
  }
}

OnhPointCloud extract_point_cloud(const LabeledVolume& vol) {
  vol.validate();
  const auto [nx, ny, nz] = vol.dims;

  struct Anterior {
    Vec3 p;
    std::uint8_t tissue;
  };
  std::vector<Anterior> anterior;
  std::array<std::vector<Vec3>, kTissueClasses> posterior;

  for (int y = 0; y < ny; ++y) {
    for (int x = 0; x < nx; ++x) {
      std::array<int, kTissueClasses> first, last;
      first.fill(-1);
      last.fill(-1);
      for (int z = 0; z < nz; ++z) {
        const auto c = vol.label(x, y, z);
        if (c == 0) continue;
        if (first[c] < 0) first[c] = z;
        last[c] = z;
      }
      for (int c = 1; c < kTissueClasses; ++c) {
        if (first[c] < 0) continue;
        anterior.push_back({vol.to_mm(x, y, first[c]), static_cast<std::uint8_t>(c)});
        posterior[c].push_back(vol.to_mm(x, y, last[c]));
      }
    }
  }
  if (anterior.empty()) throw Error("no labeled voxels");

  std::array<KdTree, kTissueClasses> trees;
  for (int c = 1; c < kTissueClasses; ++c) {
    if (posterior[c].empty()) continue;
    Eigen::Matrix3Xd pts(3, static_cast<Eigen::Index>(posterior[c].size()));
    for (std::size_t i = 0; i < posterior[c].size(); ++i)
      pts.col(static_cast<Eigen::Index>(i)) = posterior[c][i];
    trees[c] = KdTree(std::move(pts));
  }

  OnhPointCloud cloud;
  const auto n = static_cast<Eigen::Index>(anterior.size());
  cloud.points.resize(3, n);
  cloud.thickness.resize(n);
  cloud.tissue.resize(anterior.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& a = anterior[static_cast<std::size_t>(i)];
    cloud.points.col(i) = a.p;
    cloud.tissue[static_cast<std::size_t>(i)] = a.tissue;
    cloud.thickness(i) = std::sqrt(trees[a.tissue].nearest_dist2(a.p));
  }
  cloud.frame = Frame::raw;
  return cloud;
}

BmoPlane fit_bmo_plane(const std::vector<Vec3>& points) {
  Eigen::Matrix3Xd m(3, static_cast<Eigen::Index>(points.size()));
  for (std::size_t i = 0; i < points.size(); ++i) m.col(static_cast<Eigen::Index>(i)) = points[i];
  return fit_bmo_plane(m);
}

RigidTransform bmo_alignment(const BmoPlane& plane) {
  const Vec3 n = plane.normal.normalized();
  const Vec3 z = Vec3::UnitZ();
  const double c = n.dot(z);
  Mat3 rot;
  if (c < -1.0 + 1e-12) {
    rot = Eigen::AngleAxisd(M_PI, Vec3::UnitX()).toRotationMatrix();
  } else {
    // Rodrigues form of the rotation about n x z by acos(c).
    const Vec3 v = n.cross(z);
    Mat3 vx;
    vx << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    rot = Mat3::Identity() + vx + vx * vx / (1.0 + c);
  }
  RigidTransform t = RigidTransform::Identity();
  t.linear() = rot;
  t.translation() = -rot * plane.center;
  return t;
}

OnhPointCloud align_to_bmo(const OnhPointCloud& cloud, const BmoPlane& plane) {
  if (cloud.frame != Frame::raw) throw Error("align_to_bmo expects a raw-frame cloud");
  const RigidTransform t = bmo_alignment(plane);
  OnhPointCloud out = cloud;
  out.points = (t.linear() * cloud.points).colwise() + t.translation();
  out.frame = Frame::bmo_aligned;
  return out;
}

OnhPointCloud cylindrical_crop(const OnhPointCloud& cloud, double radius_mm) {
  if (cloud.frame != Frame::bmo_aligned)
    throw Error("cylindrical_crop expects a bmo-aligned cloud");
  if (!(radius_mm > 0.0)) throw Error("crop radius must be positive");
  std::vector<Eigen::Index> keep;
  keep.reserve(static_cast<std::size_t>(cloud.size()));
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    const double x = cloud.points(0, i), y = cloud.points(1, i);
    if (std::sqrt(x * x + y * y) <= radius_mm) keep.push_back(i);
  }
  if (keep.empty()) throw Error("crop removed all points");
  return cloud.subset(keep);
}

std::vector<Eigen::Index> resample_indices(Eigen::Index cloud_size, int n, Rng& rng) {
  if (n < 1) throw Error("resample count must be >= 1");
  if (cloud_size < 1) throw Error("cannot resample an empty cloud");
  std::vector<Eigen::Index> out(static_cast<std::size_t>(n));
  if (cloud_size >= n) {
    // Partial Fisher-Yates.
    std::vector<Eigen::Index> pool(static_cast<std::size_t>(cloud_size));
    std::iota(pool.begin(), pool.end(), Eigen::Index{0});
    for (int i = 0; i < n; ++i) {
      const auto remaining = static_cast<std::uint64_t>(cloud_size - i);
      const auto j = i + static_cast<Eigen::Index>(uniform_index(rng, remaining));
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
      out[static_cast<std::size_t>(i)] = pool[static_cast<std::size_t>(i)];
    }
  } else {
    for (auto& idx : out)
      idx = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(cloud_size)));
  }
  return out;
}

OnhPointCloud resample(const OnhPointCloud& cloud, int n, Rng& rng) {
  const auto idx = resample_indices(cloud.size(), n, rng);
  return cloud.subset(idx);
}

}  // namespace onh
