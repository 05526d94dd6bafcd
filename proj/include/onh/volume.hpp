#pragma once

#include <onh/common.hpp>

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace onh {

enum class Tissue : std::uint8_t {
  background = 0,
  rnfl_prelamina = 1,
  gcl_ipl = 2,
  other_retina = 3,
  rpe = 4,
  lamina_cribrosa = 5,
};

inline constexpr int kTissueClasses = 6;

/// Lateral (x), B-scan (y) and axial (z) voxel spacing of the clinical scans, mm.
inline const Vec3 kDefaultSpacingMm{0.0115, 0.0351, 0.00387};

using Dims = std::array<int, 3>;

/// Segmented OCT volume. Storage is x-fastest; z is the axial axis with the
/// anterior surface at small z.
struct LabeledVolume {
  Dims dims{0, 0, 0};
  Vec3 spacing = kDefaultSpacingMm;
  std::vector<std::uint8_t> labels;
  std::vector<float> intensity;

  LabeledVolume() = default;
  LabeledVolume(const Dims& d, const Vec3& s)
      : dims(d),
        spacing(s),
        labels(static_cast<std::size_t>(d[0]) * d[1] * d[2], 0),
        intensity(labels.size(), 0.0f) {}

  std::size_t size() const { return labels.size(); }
  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims[1]) * z);
  }
  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims[0] && y < dims[1] && z < dims[2];
  }
  std::uint8_t& label(int x, int y, int z) { return labels[index(x, y, z)]; }
  std::uint8_t label(int x, int y, int z) const { return labels[index(x, y, z)]; }
  float& value(int x, int y, int z) { return intensity[index(x, y, z)]; }
  float value(int x, int y, int z) const { return intensity[index(x, y, z)]; }

  /// Voxel centre in mm.
  Vec3 to_mm(int x, int y, int z) const {
    return {x * spacing.x(), y * spacing.y(), z * spacing.z()};
  }

  /// Throws Error on a broken invariant.
  void validate() const;
};

}  // namespace onh
