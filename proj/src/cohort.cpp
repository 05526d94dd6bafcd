#include <onh/cohort.hpp>
#include <onh/strain.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace onh {

const std::array<std::array<double, 2>, kVisualFieldPoints>& visual_field_layout() {
  static const auto layout = [] {
    std::array<std::array<double, 2>, kVisualFieldPoints> pts{};
    const std::vector<std::pair<double, std::vector<double>>> rows = {
        {21, {-9, -3, 3, 9}},
        {15, {-15, -9, -3, 3, 9, 15}},
        {9, {-21, -15, -9, -3, 3, 9, 15, 21}},
        {3, {-27, -21, -15, -9, -3, 3, 9, 21}},
        {-3, {-27, -21, -15, -9, -3, 3, 9, 21}},
        {-9, {-21, -15, -9, -3, 3, 9, 15, 21}},
        {-15, {-15, -9, -3, 3, 9, 15}},
        {-21, {-9, -3, 3, 9}},
    };
    std::size_t i = 0;
    for (const auto& [y, xs] : rows)
      for (double x : xs) pts[i++] = {x, y};
    return pts;
  }();
  return layout;
}

int onh_sector(double x, double y) {
  double deg = std::atan2(y, x) * 180.0 / std::numbers::pi;
  if (deg < 0.0) deg += 360.0;
  return std::min(kOnhSectors - 1, static_cast<int>(deg / 60.0));
}

SectorMap default_sector_map() {
  SectorMap map{};
  const auto& layout = visual_field_layout();
  for (std::size_t i = 0; i < layout.size(); ++i)
    map[i] = static_cast<std::uint8_t>(onh_sector(layout[i][0], layout[i][1]));
  return map;
}

void CohortSpec::validate() const {
  if (n_subjects < 10) throw ConfigError("cohort.n_subjects", "must be >= 10");
  for (int d : dims)
    if (d < 16) throw ConfigError("cohort.dims", "every axis must be >= 16");
  if ((spacing.array() <= 0.0).any()) throw ConfigError("cohort.spacing_mm", "must be positive");
  if (md_min < -25.2 || md_max > -1.8 || md_min >= md_max)
    throw ConfigError("cohort.md_range", "must lie within [-25.2, -1.8]");
  if (!(strain_min > 0.0) || strain_max < strain_min)
    throw ConfigError("cohort.strain_range", "must be positive and ordered");
  for (auto s : sector_map)
    if (s >= kOnhSectors) throw ConfigError("cohort.sector_map", "sector index out of range");
}

double CompressionPattern::amplitude_at(double x, double y) const {
  constexpr double kappa = 3.0;
  const double dx = x - centre.x(), dy = y - centre.y();
  const double theta = std::atan2(dy, dx);
  double num = 0.0, den = 0.0, mean = 0.0;
  for (int s = 0; s < kOnhSectors; ++s) {
    const double centre_angle = (s + 0.5) * std::numbers::pi / 3.0;
    const double w = std::exp(kappa * std::cos(theta - centre_angle));
    num += w * amplitude[static_cast<std::size_t>(s)];
    den += w;
    mean += amplitude[static_cast<std::size_t>(s)];
  }
  mean /= kOnhSectors;
  const double fade = 1.0 - std::exp(-(dx * dx + dy * dy) / (core_radius * core_radius));
  return mean + (num / den - mean) * fade;
}

Vec3 CompressionPattern::operator()(const Vec3& v) const {
  const double a = amplitude_at(v.x(), v.y());
  return {-lateral_ratio * a * (v.x() - centre.x()), -lateral_ratio * a * (v.y() - centre.y()),
          -a * (v.z() - z_ref)};
}

Mat3 CompressionPattern::gradient(const Vec3& v, const Vec3& spacing) const {
  constexpr double h = 1e-4;
  Mat3 g;
  for (int c = 0; c < 3; ++c) {
    Vec3 lo = v, hi = v;
    lo[c] -= h;
    hi[c] += h;
    g.col(c) = ((*this)(hi) - (*this)(lo)) / (2.0 * h);
  }
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) g(r, c) *= spacing[r] / spacing[c];
  return g;
}

double CompressionPattern::effective_strain_mm(const Vec3& mm, const Vec3& spacing) const {
  const Mat3 g = gradient(mm.cwiseQuotient(spacing), spacing);
  return effective_strain(Mat3(0.5 * (g + g.transpose())));
}

namespace {

void gaussian_blur(std::vector<float>& data, const Dims& dims, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int t = -radius; t <= radius; ++t)
    total += k[static_cast<std::size_t>(t + radius)] = std::exp(-0.5 * t * t / (sigma * sigma));
  for (double& w : k) w /= total;

  const std::size_t stride[3] = {1, static_cast<std::size_t>(dims[0]),
                                 static_cast<std::size_t>(dims[0]) * dims[1]};
  std::vector<float> tmp(data.size());
  for (int axis = 0; axis < 3; ++axis) {
    for (int z = 0; z < dims[2]; ++z)
      for (int y = 0; y < dims[1]; ++y)
        for (int x = 0; x < dims[0]; ++x) {
          const int pos[3] = {x, y, z};
          const std::size_t base = x + stride[1] * y + stride[2] * z;
          double acc = 0.0;
          for (int t = -radius; t <= radius; ++t) {
            int q = pos[axis] + t;
            q = q < 0 ? -q - 1 : (q >= dims[axis] ? 2 * dims[axis] - q - 1 : q);
            q = std::clamp(q, 0, dims[axis] - 1);
            acc += k[static_cast<std::size_t>(t + radius)] *
                   data[base + stride[axis] * static_cast<std::size_t>(q) -
                        stride[axis] * static_cast<std::size_t>(pos[axis])];
          }
          tmp[base] = static_cast<float>(acc);
        }
    data.swap(tmp);
  }
}

double truncated_normal(Rng& rng, double mean, double sd, double lo, double hi) {
  for (int i = 0; i < 1000; ++i) {
    const double v = mean + sd * normal01(rng);
    if (v >= lo && v <= hi) return v;
  }
  return std::clamp(mean, lo, hi);
}

// Layer geometry in mm, relative to the anterior RPE surface.
constexpr double kRpeDepth = 0.46;
constexpr double kRpeThickness = 0.04;
constexpr double kOuterRetina = 0.10;
constexpr double kGclIpl = 0.06;
constexpr double kRnflBase = 0.16;
constexpr double kLcOffset = 0.12;
constexpr double kLcThickness = 0.16;

constexpr std::array<float, kTissueClasses> kBaseIntensity{0.08f, 0.75f, 0.55f, 0.40f, 0.92f, 0.65f};
constexpr std::array<float, kTissueClasses> kTextureAmplitude{0.05f, 0.15f, 0.15f, 0.15f, 0.06f, 0.15f};

}  // namespace

SubjectRecord generate_phantom(const CohortSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  SubjectRecord rec;
  rec.seed = seed;
  const auto [nx, ny, nz] = spec.dims;
  const Vec3 sp = spec.spacing;

  const double cx = 0.5 * (nx - 1) + uniform(rng, -2.0, 2.0);
  const double cy = 0.5 * (ny - 1) + uniform(rng, -2.0, 2.0);
  const double tilt_x = uniform(rng, -0.02, 0.02), tilt_y = uniform(rng, -0.02, 0.02);
  rec.severity_md = truncated_normal(rng, spec.md_mean, spec.md_sd, spec.md_min, spec.md_max);
  rec.cup_radius = uniform(rng, spec.cup_radius_min, spec.cup_radius_max);
  const double cup_depth = 0.22 + 0.006 * (-rec.severity_md);
  std::array<double, kOnhSectors> rnfl_sector{};
  for (auto& v : rnfl_sector) v = uniform(rng, -1.0, 1.0);
  const double subject_strain = uniform(rng, spec.strain_min, spec.strain_max);
  std::array<double, kOnhSectors> strain_sector{};
  for (auto& v : strain_sector)
    v = subject_strain * (1.0 + spec.strain_sector_spread * uniform(rng, -1.0, 1.0));

  auto rpe_depth = [&](double px, double py) { return kRpeDepth + tilt_x * px + tilt_y * py; };

  CompressionPattern pattern;
  pattern.centre = {cx, cy, 0.0};
  pattern.z_ref = kRpeDepth / sp.z();
  pattern.amplitude = strain_sector;
  pattern.lateral_ratio = spec.lateral_ratio;
  rec.truth = pattern;

  LabeledVolume vol(spec.dims, sp);
  const double rnfl_scale = kRnflBase * (1.0 + rec.severity_md / 45.0);
  for (int y = 0; y < ny; ++y)
    for (int x = 0; x < nx; ++x) {
      const double px = (x - cx) * sp.x(), py = (y - cy) * sp.y();
      const double r = std::hypot(px, py);
      const double zr = rpe_depth(px, py);
      // Sector-blended RNFL thickness.
      const double theta = std::atan2(py, px);
      double num = 0.0, den = 0.0;
      for (int s = 0; s < kOnhSectors; ++s) {
        const double w = std::exp(3.0 * std::cos(theta - (s + 0.5) * std::numbers::pi / 3.0));
        num += w * rnfl_sector[static_cast<std::size_t>(s)];
        den += w;
      }
      const double rnfl = rnfl_scale * (1.0 + 0.25 * num / den);
      const double ilm_outer = zr - kGclIpl - kOuterRetina - rnfl;

      for (int z = 0; z < nz; ++z) {
        const double d = z * sp.z();
        std::uint8_t c = 0;
        if (r >= spec.bmo_radius) {
          if (d >= zr && d < zr + kRpeThickness) c = 4;
          else if (d >= zr - kOuterRetina && d < zr) c = 3;
          else if (d >= zr - kOuterRetina - kGclIpl && d < zr - kOuterRetina) c = 2;
          else if (d >= ilm_outer && d < zr - kOuterRetina - kGclIpl) c = 1;
        } else {
          const double ilm = ilm_outer + cup_depth * std::exp(-(r * r) / (rec.cup_radius * rec.cup_radius));
          const double lc_top = zr + kLcOffset;
          if (r < rec.cup_radius) {
            if (d >= ilm && d < lc_top) c = 1;
            else if (d >= lc_top && d < lc_top + kLcThickness) c = 5;
          } else if (d >= ilm && d < zr + kRpeThickness) {
            c = 1;
          }
        }
        vol.label(x, y, z) = c;
      }
    }

  // Band-limited texture, unit standard deviation.
  std::vector<float> tex(vol.size());
  for (auto& t : tex) t = static_cast<float>(normal01(rng));
  gaussian_blur(tex, spec.dims, spec.texture_sigma);
  double s2 = 0.0;
  for (float t : tex) s2 += static_cast<double>(t) * t;
  const auto inv_sd = static_cast<float>(1.0 / std::sqrt(s2 / static_cast<double>(tex.size())));
  for (std::size_t i = 0; i < vol.size(); ++i) {
    const auto c = vol.labels[i];
    vol.intensity[i] = std::clamp(kBaseIntensity[c] + kTextureAmplitude[c] * tex[i] * inv_sd, 0.0f, 1.0f);
  }

  for (int k = 0; k < 24; ++k) {
    const double phi = 2.0 * std::numbers::pi * k / 24.0;
    const double px = spec.bmo_radius * std::cos(phi), py = spec.bmo_radius * std::sin(phi);
    rec.bmo_ring.emplace_back(cx * sp.x() + px, cy * sp.y() + py, rpe_depth(px, py));
  }

  rec.deformed = warp_volume(vol, [&pattern](const Vec3& v) { return pattern(v); });
  rec.baseline = std::move(vol);
  return rec;
}

LabeledVolume warp_volume(const LabeledVolume& vol, const DisplacementFn& u) {
  vol.validate();
  LabeledVolume out(vol.dims, vol.spacing);
  const auto [nx, ny, nz] = vol.dims;
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        const Vec3 disp = u(Vec3(x, y, z));
        if (!disp.allFinite() || disp.norm() > 4.0)
          throw Error("displacement exceeds the 4-voxel bound");
        const Vec3 src = Vec3(x, y, z) - disp;
        const std::size_t o = out.index(x, y, z);

        const int rx = static_cast<int>(std::lround(src.x()));
        const int ry = static_cast<int>(std::lround(src.y()));
        const int rz = static_cast<int>(std::lround(src.z()));
        if (vol.contains(rx, ry, rz)) out.labels[o] = vol.label(rx, ry, rz);

        if (src.x() < 0 || src.y() < 0 || src.z() < 0 || src.x() > nx - 1 ||
            src.y() > ny - 1 || src.z() > nz - 1)
          continue;
        const int x0 = std::min(static_cast<int>(src.x()), nx - 2);
        const int y0 = std::min(static_cast<int>(src.y()), ny - 2);
        const int z0 = std::min(static_cast<int>(src.z()), nz - 2);
        const double fx = src.x() - x0, fy = src.y() - y0, fz = src.z() - z0;
        double acc = 0.0;
        for (int c = 0; c < 8; ++c) {
          const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
          const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
          if (w != 0.0) acc += w * vol.value(x0 + dx, y0 + dy, z0 + dz);
        }
        out.intensity[o] = static_cast<float>(acc);
      }
  return out;
}

SectorStats sector_statistics(const OnhPointCloud& cloud) {
  SectorStats st;
  std::array<int, kOnhSectors> rnfl_count{};
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    const auto s = static_cast<std::size_t>(onh_sector(cloud.points(0, i), cloud.points(1, i)));
    st.count[s] += 1;
    if (cloud.strain) st.strain[s] += (*cloud.strain)(i);
    if (cloud.tissue[static_cast<std::size_t>(i)] == static_cast<std::uint8_t>(Tissue::rnfl_prelamina)) {
      st.thickness[s] += cloud.thickness(i);
      rnfl_count[s] += 1;
    }
  }
  for (std::size_t s = 0; s < kOnhSectors; ++s) {
    if (st.count[s] > 0) st.strain[s] /= st.count[s];
    st.thickness[s] = rnfl_count[s] > 0 ? st.thickness[s] / rnfl_count[s] : -1.0;
  }
  return st;
}

std::array<double, kVisualFieldPoints> defect_scores(const SectorStats& st, const SectorMap& sectors,
                                                     double severity_md, const LabelModel& m) {
  std::array<double, kVisualFieldPoints> logit{};
  const double sev = (-severity_md - m.severity_ref) / m.severity_scale;
  for (std::size_t j = 0; j < kVisualFieldPoints; ++j) {
    const auto s = sectors[j];
    const double zs = (st.strain[s] - m.strain_ref) / m.strain_scale;
    const double zt = st.thickness[s] < 0.0 ? 0.0 : (st.thickness[s] - m.thickness_ref) / m.thickness_scale;
    logit[j] = m.bias + m.alpha * zs - m.beta * zt + m.gamma * sev;
  }
  return logit;
}

VisualFieldMap plant_vf_labels(const OnhPointCloud& cloud, const SectorMap& sectors,
                               double severity_md, const LabelModel& m, Rng& rng) {
  if (!cloud.strain) throw Error("plant_vf_labels needs a strain attribute");
  const SectorStats st = sector_statistics(cloud);
  const auto logits = defect_scores(st, sectors, severity_md, m);
  VisualFieldMap vf;
  std::array<double, kVisualFieldPoints> probs{};
  for (std::size_t j = 0; j < kVisualFieldPoints; ++j) {
    const double noise = m.noise_sd * normal01(rng);
    const double draw = uniform01(rng);
    if (st.count[sectors[j]] == 0) {
      probs[j] = 1e-12;
      vf.labels[j] = 0;
      continue;
    }
    const double p = 1.0 / (1.0 + std::exp(-(logits[j] + noise)));
    probs[j] = std::clamp(p, 1e-12, 1.0 - 1e-12);
    vf.labels[j] = draw < p ? 1 : 0;
  }
  vf.probs = probs;
  return vf;
}

OnhPointCloud truth_cloud(const SubjectRecord& subject, double crop_radius_mm) {
  OnhPointCloud raw = extract_point_cloud(subject.baseline);
  Eigen::VectorXd eff(raw.size());
  for (Eigen::Index i = 0; i < raw.size(); ++i)
    eff(i) = subject.truth.effective_strain_mm(raw.points.col(i), subject.baseline.spacing);
  raw.strain = eff;
  const BmoPlane plane = fit_bmo_plane(subject.bmo_ring);
  return cylindrical_crop(align_to_bmo(raw, plane), crop_radius_mm);
}

std::uint64_t subject_seed(const CohortSpec& spec, int index) {
  return split_seed(spec.seed, static_cast<std::uint64_t>(index));
}

std::string subject_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "S%04d", index);
  return buf;
}

SubjectRecord generate_subject(const CohortSpec& spec, int index, double crop_radius_mm) {
  SubjectRecord rec = generate_phantom(spec, subject_seed(spec, index));
  rec.id = subject_id(index);
  Rng label_rng(split_seed(rec.seed, 0x5eed));
  rec.vf = plant_vf_labels(truth_cloud(rec, crop_radius_mm), spec.sector_map, rec.severity_md,
                           spec.labels, label_rng);
  return rec;
}

}  // namespace onh
