#include <onh/dvc.hpp>
#include <onh/parallel.hpp>

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace onh {

Eigen::Matrix3Xd NodeGrid::positions_mm() const {
  Eigen::Matrix3Xd out(3, count());
  for (int k = 0; k < dims[2]; ++k)
    for (int j = 0; j < dims[1]; ++j)
      for (int i = 0; i < dims[0]; ++i)
        out.col(index(i, j, k)) = voxel_position(i, j, k).cwiseProduct(spacing);
  return out;
}

void DisplacementField::validate() const {
  if (grid.stride <= 0) throw Error("grid stride must be positive");
  if (vectors.cols() != grid.count() || confidence.size() != grid.count())
    throw Error("displacement field size mismatch");
  if (!vectors.allFinite()) throw Error("non-finite displacement");
  if ((confidence.array() < -1.0).any() || (confidence.array() > 1.0).any())
    throw Error("confidence outside [-1, 1]");
}

namespace {

struct Block {
  std::vector<double> centered;
  double norm = 0.0;
};

Block reference_block(const LabeledVolume& v, const Eigen::Vector3i& lo, int size) {
  Block b;
  b.centered.reserve(static_cast<std::size_t>(size) * size * size);
  double sum = 0.0;
  for (int z = 0; z < size; ++z)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double val = v.value(lo.x() + x, lo.y() + y, lo.z() + z);
        b.centered.push_back(val);
        sum += val;
      }
  const double mean = sum / static_cast<double>(b.centered.size());
  double ss = 0.0;
  for (double& c : b.centered) {
    c -= mean;
    ss += c * c;
  }
  b.norm = std::sqrt(ss);
  return b;
}

// NCC of a centred reference block against the deformed block at `lo`.
double block_ncc(const Block& ref, const LabeledVolume& def, const Eigen::Vector3i& lo, int size) {
  double dot = 0.0, sum = 0.0, sum2 = 0.0;
  std::size_t n = 0;
  for (int z = 0; z < size; ++z)
    for (int y = 0; y < size; ++y) {
      const float* row = &def.intensity[def.index(lo.x(), lo.y() + y, lo.z() + z)];
      for (int x = 0; x < size; ++x, ++n) {
        const double q = row[x];
        dot += ref.centered[n] * q;
        sum += q;
        sum2 += q * q;
      }
    }
  const double var = sum2 - sum * sum / static_cast<double>(n);
  if (!(var > 0.0)) return 0.0;
  return std::clamp(dot / (ref.norm * std::sqrt(var)), -1.0, 1.0);
}

double trilinear(const LabeledVolume& v, const Vec3& p) {
  const int x = static_cast<int>(std::floor(p.x())), y = static_cast<int>(std::floor(p.y())),
            z = static_cast<int>(std::floor(p.z()));
  const double fx = p.x() - x, fy = p.y() - y, fz = p.z() - z;
  double out = 0.0;
  for (int c = 0; c < 8; ++c) {
    const int dx = c & 1, dy = (c >> 1) & 1, dz = c >> 2;
    const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
    if (w != 0.0) out += w * v.value(x + dx, y + dy, z + dz);
  }
  return out;
}

// Inverse-compositional Gauss-Newton on the zero-normalised SSD, translation
// only, starting from u. Returns false when the iteration leaves the volume
// or does not converge; `ncc` receives the correlation at the result.
bool refine_translation(const LabeledVolume& ref, const LabeledVolume& def, const Eigen::Vector3i& lo,
                        int size, const Block& rb, Vec3& u, double& ncc) {
  for (int a = 0; a < 3; ++a)
    if (lo[a] < 1 || lo[a] + size >= ref.dims[a]) return false;

  const std::size_t n = rb.centered.size();
  std::vector<Vec3> grad(n);
  Mat3 h = Mat3::Zero();
  std::size_t i = 0;
  for (int z = 0; z < size; ++z)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x, ++i) {
        const int px = lo.x() + x, py = lo.y() + y, pz = lo.z() + z;
        grad[i] = 0.5 * Vec3(ref.value(px + 1, py, pz) - ref.value(px - 1, py, pz),
                             ref.value(px, py + 1, pz) - ref.value(px, py - 1, pz),
                             ref.value(px, py, pz + 1) - ref.value(px, py, pz - 1));
        h += grad[i] * grad[i].transpose();
      }
  Eigen::LDLT<Mat3> solver(h);
  if (solver.info() != Eigen::Success || !(solver.vectorD().minCoeff() > 1e-12 * h.trace())) return false;

  const Vec3 start = u;
  std::vector<double> g(n);
  for (int iter = 0; iter < 30; ++iter) {
    const Vec3 base = lo.cast<double>() + u;
    for (int a = 0; a < 3; ++a)
      if (base[a] < 0.0 || base[a] + size > def.dims[a]) return false;
    double sum = 0.0;
    i = 0;
    for (int z = 0; z < size; ++z)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x, ++i) sum += g[i] = trilinear(def, base + Vec3(x, y, z));
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0, dot = 0.0;
    for (i = 0; i < n; ++i) {
      g[i] -= mean;
      ss += g[i] * g[i];
      dot += rb.centered[i] * g[i];
    }
    if (!(ss > 0.0)) return false;
    const double scale = rb.norm / std::sqrt(ss);
    ncc = std::clamp(dot / (rb.norm * std::sqrt(ss)), -1.0, 1.0);

    Vec3 b = Vec3::Zero();
    for (i = 0; i < n; ++i) b += grad[i] * (rb.centered[i] - scale * g[i]);
    const Vec3 dp = -solver.solve(b);
    u -= dp;
    if ((u - start).cwiseAbs().maxCoeff() > 1.0) return false;
    if (dp.norm() < 1e-5) return true;
  }
  return false;
}

}  // namespace

DisplacementField block_match(const LabeledVolume& ref, const LabeledVolume& def,
                              const DvcConfig& cfg) {
  if (ref.dims != def.dims || !ref.spacing.isApprox(def.spacing, 0.0))
    throw Error("block_match volumes must share dims and spacing");
  if (cfg.block < 5) throw Error("block must be >= 5 voxels");
  if (cfg.search < 1) throw Error("search radius must be >= 1");
  if (cfg.stride < 1) throw Error("stride must be >= 1");
  for (int d : ref.dims)
    if (cfg.block > d) throw Error("block exceeds volume");

  const int half = cfg.block / 2;
  DisplacementField field;
  field.grid.stride = cfg.stride;
  field.grid.spacing = ref.spacing;
  for (int a = 0; a < 3; ++a) {
    // Inset by the search radius where the volume allows it, so every node
    // sees its full search window.
    const int inset = std::min(cfg.search, (ref.dims[a] - cfg.block) / 2);
    const int first = half + inset, last = ref.dims[a] - cfg.block + half - inset;
    field.grid.origin[a] = first;
    field.grid.dims[a] = (last - first) / cfg.stride + 1;
  }
  const Eigen::Index nodes = field.grid.count();
  field.vectors.setZero(3, nodes);
  field.confidence.setZero(nodes);

  const int s = cfg.search;
  const int w = 2 * s + 1;
  const auto& gd = field.grid.dims;

  parallel_for(static_cast<std::size_t>(nodes), [&](std::size_t node) {
    const int i = static_cast<int>(node % gd[0]);
    const int j = static_cast<int>((node / gd[0]) % gd[1]);
    const int k = static_cast<int>(node / (static_cast<std::size_t>(gd[0]) * gd[1]));
    const Eigen::Vector3i centre = field.grid.origin + cfg.stride * Eigen::Vector3i(i, j, k);
    const Eigen::Vector3i lo = centre.array() - half;

    const Block rb = reference_block(ref, lo, cfg.block);
    if (!(rb.norm > 0.0)) return;  // untextured: zero vector, zero confidence

    constexpr double kInvalid = -std::numeric_limits<double>::infinity();
    std::vector<double> ncc(static_cast<std::size_t>(w) * w * w, kInvalid);
    auto at = [&](int dx, int dy, int dz) -> double& {
      return ncc[static_cast<std::size_t>((dx + s) + w * ((dy + s) + w * (dz + s)))];
    };
    double best = kInvalid;
    Eigen::Vector3i arg = Eigen::Vector3i::Zero();
    for (int dz = -s; dz <= s; ++dz)
      for (int dy = -s; dy <= s; ++dy)
        for (int dx = -s; dx <= s; ++dx) {
          const Eigen::Vector3i p = lo + Eigen::Vector3i(dx, dy, dz);
          if (!def.contains(p.x(), p.y(), p.z()) ||
              !def.contains(p.x() + cfg.block - 1, p.y() + cfg.block - 1, p.z() + cfg.block - 1))
            continue;
          const double c = block_ncc(rb, def, p, cfg.block);
          at(dx, dy, dz) = c;
          if (c > best) {
            best = c;
            arg = {dx, dy, dz};
          }
        }
    if (best == kInvalid) return;

    Vec3 u = arg.cast<double>();
    // A perfect correlation is an exact integer match; the parabola through a
    // finite-sample autocorrelation would only add bias.
    if (best < 1.0 - 1e-9) {
      for (int a = 0; a < 3; ++a) {
        if (arg[a] - 1 < -s || arg[a] + 1 > s) continue;
        Eigen::Vector3i m = arg, p = arg;
        m[a] -= 1;
        p[a] += 1;
        const double cm = at(m.x(), m.y(), m.z()), cp = at(p.x(), p.y(), p.z());
        if (cm == kInvalid || cp == kInvalid) continue;
        const double denom = cm - 2.0 * best + cp;
        if (denom < 0.0) u[a] += std::clamp(0.5 * (cm - cp) / denom, -0.5, 0.5);
      }
      Vec3 refined = u;
      double c = best;
      if (refine_translation(ref, def, lo, cfg.block, rb, refined, c) && c >= best) {
        u = refined;
        best = c;
      }
    }
    field.vectors.col(static_cast<Eigen::Index>(node)) = u;
    field.confidence(static_cast<Eigen::Index>(node)) = best;
  });
  return field;
}

DisplacementField fill_unreliable(const DisplacementField& field, double min_confidence) {
  DisplacementField out = field;
  const auto& g = field.grid;
  const Eigen::Index n = g.count();
  std::vector<char> ok(static_cast<std::size_t>(n));
  for (Eigen::Index v = 0; v < n; ++v)
    ok[static_cast<std::size_t>(v)] = field.confidence(v) >= min_confidence;

  static const int offsets[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0},
                                    {0, 1, 0},  {0, 0, -1}, {0, 0, 1}};
  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<char> next = ok;
    for (int k = 0; k < g.dims[2]; ++k)
      for (int j = 0; j < g.dims[1]; ++j)
        for (int i = 0; i < g.dims[0]; ++i) {
          const Eigen::Index v = g.index(i, j, k);
          if (ok[static_cast<std::size_t>(v)]) continue;
          Vec3 sum = Vec3::Zero();
          int cnt = 0;
          for (const auto& o : offsets) {
            const int a = i + o[0], b = j + o[1], c = k + o[2];
            if (a < 0 || b < 0 || c < 0 || a >= g.dims[0] || b >= g.dims[1] || c >= g.dims[2])
              continue;
            const Eigen::Index nb = g.index(a, b, c);
            if (!ok[static_cast<std::size_t>(nb)]) continue;
            sum += out.vectors.col(nb);
            ++cnt;
          }
          if (cnt == 0) continue;
          out.vectors.col(v) = sum / cnt;
          next[static_cast<std::size_t>(v)] = 1;
          changed = true;
        }
    ok.swap(next);
  }
  return out;
}

namespace {

// Point reflection about the end nodes, u(-i) = 2 u(0) - u(i), so affine
// fields pass through the smoother unchanged.
Vec3 sample_reflected(const Eigen::Matrix3Xd& v, const NodeGrid& g, int axis, int idx[3]) {
  const int n = g.dims[axis];
  const int i = idx[axis];
  if (i >= 0 && i < n) return v.col(g.index(idx[0], idx[1], idx[2]));
  if (n == 1) {
    idx[axis] = 0;
    return v.col(g.index(idx[0], idx[1], idx[2]));
  }
  const int edge = i < 0 ? 0 : n - 1;
  idx[axis] = edge;
  const Vec3 e = v.col(g.index(idx[0], idx[1], idx[2]));
  idx[axis] = 2 * edge - i;
  return 2.0 * e - sample_reflected(v, g, axis, idx);
}

}  // namespace

DisplacementField smooth_displacement(const DisplacementField& field, double sigma) {
  if (sigma < 0.0) throw Error("smoothing sigma must be >= 0");
  if (sigma == 0.0) return field;

  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int t = -radius; t <= radius; ++t) {
    kernel[static_cast<std::size_t>(t + radius)] = std::exp(-0.5 * t * t / (sigma * sigma));
    total += kernel[static_cast<std::size_t>(t + radius)];
  }
  for (double& kv : kernel) kv /= total;

  const auto& g = field.grid;
  Eigen::Matrix3Xd cur = field.vectors;
  for (int axis = 0; axis < 3; ++axis) {
    Eigen::Matrix3Xd next(3, cur.cols());
    for (int k = 0; k < g.dims[2]; ++k)
      for (int j = 0; j < g.dims[1]; ++j)
        for (int i = 0; i < g.dims[0]; ++i) {
          Vec3 acc = Vec3::Zero();
          for (int t = -radius; t <= radius; ++t) {
            int idx[3] = {i, j, k};
            idx[axis] += t;
            acc += kernel[static_cast<std::size_t>(t + radius)] * sample_reflected(cur, g, axis, idx);
          }
          next.col(g.index(i, j, k)) = acc;
        }
    cur.swap(next);
  }
  DisplacementField out = field;
  out.vectors = std::move(cur);
  return out;
}

}  // namespace onh
