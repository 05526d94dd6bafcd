#pragma once

#include <onh/common.hpp>
#include <onh/geometry.hpp>
#include <onh/pointnet.hpp>
#include <onh/volume.hpp>

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

namespace onh {

inline constexpr int kOnhSectors = 6;

/// Synthetic sector table: VF point -> one of six 60-degree ONH sectors.
using SectorMap = std::array<std::uint8_t, kVisualFieldPoints>;

/// (x, y) in degrees of the 52 test locations of the 24-2 pattern, blind-spot
/// points removed, row by row from superior to inferior.
const std::array<std::array<double, 2>, kVisualFieldPoints>& visual_field_layout();

/// Sector of each VF location by its polar angle, 60 degrees per sector.
SectorMap default_sector_map();

/// Sector of an aligned-frame point by its polar angle.
int onh_sector(double x, double y);

/// Coefficients of the planted structure-function link. All scores are
/// logits; inputs are standardised with the *_ref / *_scale constants.
struct LabelModel {
  double alpha = 2.0;    // strain weight
  double beta = 1.0;     // RNFL thickness weight
  double gamma = 0.5;    // severity weight
  double bias = 0.0;
  double noise_sd = 0.5;
  double strain_ref = 0.0125;
  double strain_scale = 0.0046;
  double thickness_ref = 0.131;  // mm
  double thickness_scale = 0.0195;
  double severity_ref = 7.25;   // -MD, dB
  double severity_scale = 5.05;
};

struct CohortSpec {
  int n_subjects = 120;
  std::uint64_t seed = 20240501;
  Dims dims{48, 48, 44};
  Vec3 spacing{0.08, 0.08, 0.02};  // mm; desk-scale lattice
  // Severity surrogate (MD, dB): truncated normal over the clinical range.
  double md_mean = -7.25, md_sd = 5.05, md_min = -25.2, md_max = -1.8;
  // Axial compression amplitude per subject, and its sector-to-sector spread.
  double strain_min = 0.010, strain_max = 0.040, strain_sector_spread = 0.35;
  double lateral_ratio = 0.2;
  double cup_radius_min = 0.35, cup_radius_max = 0.65;  // mm
  double bmo_radius = 0.85;                             // mm
  double texture_sigma = 1.2;                           // voxels
  SectorMap sector_map = default_sector_map();
  LabelModel labels;

  void validate() const;
};

/// Smooth IOP-like deformation: axial compression about z_ref whose amplitude
/// varies by ONH sector, plus proportional lateral contraction. Voxel units.
struct CompressionPattern {
  Vec3 centre = Vec3::Zero();  // voxels
  double z_ref = 0.0;          // voxels
  std::array<double, kOnhSectors> amplitude{};
  double lateral_ratio = 0.2;
  double core_radius = 5.0;  // voxels; sector contrast fades toward the axis

  double amplitude_at(double x, double y) const;
  Vec3 operator()(const Vec3& voxel) const;
  /// Physical displacement gradient d u_mm / d x_mm at a voxel position.
  Mat3 gradient(const Vec3& voxel, const Vec3& spacing) const;
  /// Effective strain of the exact field at a point given in mm.
  double effective_strain_mm(const Vec3& mm, const Vec3& spacing) const;
};

using DisplacementFn = std::function<Vec3(const Vec3&)>;

struct SubjectRecord {
  std::string id;
  std::uint64_t seed = 0;
  LabeledVolume baseline;
  LabeledVolume deformed;
  std::vector<Vec3> bmo_ring;  // mm
  CompressionPattern truth;
  double severity_md = 0.0;
  double cup_radius = 0.0;  // mm
  VisualFieldMap vf;
};

/// Layered phantom (classes 1-5) with a central cup, band-limited texture,
/// the BMO ring and the deformed scan. Labels are not planted here.
SubjectRecord generate_phantom(const CohortSpec& spec, std::uint64_t subject_seed);

/// Pull-back warp: intensity trilinear at x - u(x), labels nearest neighbour,
/// background outside the volume. Throws if |u| exceeds 4 voxels anywhere.
LabeledVolume warp_volume(const LabeledVolume& vol, const DisplacementFn& u);

/// Per-sector means of strain (all points) and RNFL thickness (class 1).
struct SectorStats {
  std::array<double, kOnhSectors> strain{};
  std::array<double, kOnhSectors> thickness{};
  std::array<int, kOnhSectors> count{};
};
SectorStats sector_statistics(const OnhPointCloud& cloud);

/// Defect probability of each VF point before sampling (noise excluded).
std::array<double, kVisualFieldPoints> defect_scores(const SectorStats& stats,
                                                     const SectorMap& sectors,
                                                     double severity_md, const LabelModel& m);

/// Bernoulli labels from the planted logistic link.
VisualFieldMap plant_vf_labels(const OnhPointCloud& cloud, const SectorMap& sectors,
                               double severity_md, const LabelModel& m, Rng& rng);

/// Aligned, cropped cloud of a subject with the exact planted strain attached.
OnhPointCloud truth_cloud(const SubjectRecord& subject, double crop_radius_mm);

/// Subject seeds derived from the cohort seed.
std::uint64_t subject_seed(const CohortSpec& spec, int index);
std::string subject_id(int index);

/// Full subject: phantom, truth cloud, planted labels.
SubjectRecord generate_subject(const CohortSpec& spec, int index,
                               double crop_radius_mm = kDefaultCropRadiusMm);

}  // namespace onh
