#pragma once

#include <onh/cohort.hpp>
#include <onh/geometry.hpp>
#include <onh/pointnet.hpp>
#include <onh/volume.hpp>

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

namespace onh::test {

inline OnhPointCloud random_cloud(Rng& rng, Eigen::Index n, Frame frame = Frame::bmo_aligned,
                                  bool with_strain = true, double half_width = 2.0) {
  OnhPointCloud c;
  c.frame = frame;
  c.points.resize(3, n);
  c.thickness.resize(n);
  c.tissue.resize(static_cast<std::size_t>(n));
  Eigen::VectorXd strain(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    c.points.col(i) = Vec3(uniform(rng, -half_width, half_width), uniform(rng, -half_width, half_width),
                           uniform(rng, -0.5, 0.5));
    c.thickness(i) = uniform(rng, 0.0, 0.3);
    c.tissue[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(1 + uniform_index(rng, 5));
    strain(i) = uniform(rng, 0.0, 0.05);
  }
  if (with_strain) c.strain = strain;
  return c;
}

/// Gaussian-filtered white noise filling the whole volume (edge-clamped
/// convolution), intensity 0.5 + 0.15 z.
inline LabeledVolume textured_volume(const Dims& dims, std::uint64_t seed, Vec3 spacing = Vec3::Ones(),
                                     double sigma = 1.2) {
  LabeledVolume v(dims, spacing);
  Rng rng(seed);
  std::vector<double> a(v.size()), b(v.size());
  for (auto& x : a) x = normal01(rng);
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k;
  double total = 0.0;
  for (int t = -r; t <= r; ++t) total += k.emplace_back(std::exp(-0.5 * t * t / (sigma * sigma)));
  for (int axis = 0; axis < 3; ++axis) {
    for (int z = 0; z < dims[2]; ++z)
      for (int y = 0; y < dims[1]; ++y)
        for (int x = 0; x < dims[0]; ++x) {
          double s = 0.0;
          for (int t = -r; t <= r; ++t) {
            int p[3] = {x, y, z};
            p[axis] = std::clamp(p[axis] + t, 0, dims[axis] - 1);
            s += k[static_cast<std::size_t>(t + r)] * a[v.index(p[0], p[1], p[2])];
          }
          b[v.index(x, y, z)] = s / total;
        }
    std::swap(a, b);
  }
  double ss = 0.0;
  for (double x : a) ss += x * x;
  const double sd = std::sqrt(ss / static_cast<double>(a.size()));
  for (std::size_t i = 0; i < v.size(); ++i) {
    v.intensity[i] = static_cast<float>(0.5 + 0.15 * a[i] / sd);
    v.labels[i] = 1;
  }
  return v;
}

/// def(x) = ref(x - shift) by index arithmetic; outside samples are 0.
inline LabeledVolume index_shift(const LabeledVolume& ref, const Eigen::Vector3i& shift) {
  LabeledVolume out(ref.dims, ref.spacing);
  for (int z = 0; z < ref.dims[2]; ++z)
    for (int y = 0; y < ref.dims[1]; ++y)
      for (int x = 0; x < ref.dims[0]; ++x) {
        const int sx = x - shift.x(), sy = y - shift.y(), sz = z - shift.z();
        if (!ref.contains(sx, sy, sz)) continue;
        out.value(x, y, z) = ref.value(sx, sy, sz);
        out.label(x, y, z) = ref.label(sx, sy, sz);
      }
  return out;
}

// ---------------------------------------------------------------------------
// Reference network arithmetic, written with plain loops.

inline std::vector<double> reference_forward(const ModelParams<double>& p, const Eigen::MatrixXd& features) {
  const Eigen::Index n = features.cols();
  std::vector<std::vector<double>> cur(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index d = 0; d < features.rows(); ++d) cur[static_cast<std::size_t>(i)].push_back(features(d, i));
  for (const auto& layer : p.encoder) {
    for (auto& x : cur) {
      std::vector<double> y(static_cast<std::size_t>(layer.weight.rows()));
      for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
        double s = layer.bias(r);
        for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) s += layer.weight(r, c) * x[static_cast<std::size_t>(c)];
        y[static_cast<std::size_t>(r)] = s > 0.0 ? s : 0.0;
      }
      x = std::move(y);
    }
  }
  std::vector<double> g = cur[0];
  for (const auto& x : cur)
    for (std::size_t c = 0; c < g.size(); ++c) g[c] = std::max(g[c], x[c]);
  for (std::size_t li = 0; li < p.head.size(); ++li) {
    const auto& layer = p.head[li];
    std::vector<double> y(static_cast<std::size_t>(layer.weight.rows()));
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      double s = layer.bias(r);
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) s += layer.weight(r, c) * g[static_cast<std::size_t>(c)];
      if (li + 1 < p.head.size()) y[static_cast<std::size_t>(r)] = s > 0.0 ? s : 0.0;
      else y[static_cast<std::size_t>(r)] = 1.0 / (1.0 + std::exp(-s));
    }
    g = std::move(y);
  }
  return g;
}

inline double reference_bce(const std::vector<double>& probs, const Labels52& y) {
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(probs[i], 1e-7, 1.0 - 1e-7);
    total += y[i] ? -std::log(p) : -std::log(1.0 - p);
  }
  return total / static_cast<double>(probs.size());
}

// ---------------------------------------------------------------------------
// Central finite differences over every parameter.
//
// A perturbation of one weight changes a single row of that layer's output,
// so only the downstream layers are recomputed. For the first two encoder
// layers the recomputation is restricted to the points that could still be a
// channel maximum: a bound on how far any last-layer activation can move
// excludes every other point.

struct GradCheck {
  double max_rel_err = 0.0;
  std::string worst;
  Eigen::Index checked = 0;
  // Parameters whose +-h stencil straddles a ReLU or max switch. Those that
  // miss the tolerance at h are re-measured with a step shrunk until the
  // stencil is kink-free.
  Eigen::Index straddled = 0;
  Eigen::Index unresolved = 0;  // still straddling and off at h / 10^4
};

class FiniteDifference {
 public:
  FiniteDifference(const ModelParams<double>& p, const Eigen::MatrixXd& features, const Labels52& labels)
      : p_(p), y_(labels) {
    acts_.push_back(features);
    for (const auto& l : p_.encoder) {
      Eigen::MatrixXd z = l.weight * acts_.back();
      z.colwise() += l.bias;
      pre_.push_back(z);
      acts_.push_back(z.cwiseMax(0.0));
    }
    const Eigen::MatrixXd& last = acts_.back();
    global_ = last.rowwise().maxCoeff();
  }

  /// Loss with the given global feature and (optionally) modified head.
  double head_loss(const Eigen::VectorXd& g, const std::vector<DenseLayer<double>>& head, bool* kink = nullptr,
                   const Eigen::VectorXd* base_g = nullptr) const {
    Eigen::VectorXd h = g, hb = base_g ? *base_g : g;
    for (std::size_t i = 0; i + 1 < head.size(); ++i) {
      const Eigen::VectorXd z = head[i].weight * h + head[i].bias;
      if (kink) {
        const Eigen::VectorXd zb = p_.head[i].weight * hb + p_.head[i].bias;
        for (Eigen::Index k = 0; k < z.size(); ++k)
          if ((z(k) > 0.0) != (zb(k) > 0.0)) *kink = true;
        hb = zb.cwiseMax(0.0);
      }
      h = z.cwiseMax(0.0);
    }
    const Eigen::VectorXd logits = head.back().weight * h + head.back().bias;
    std::vector<double> probs(static_cast<std::size_t>(logits.size()));
    for (Eigen::Index i = 0; i < logits.size(); ++i) probs[static_cast<std::size_t>(i)] = 1.0 / (1.0 + std::exp(-logits(i)));
    return reference_bce(probs, y_);
  }

  double base_loss() const { return head_loss(global_, p_.head); }

  /// Compares every analytic gradient with (L(t+h) - L(t-h)) / 2h.
  GradCheck check(const ModelParams<double>& analytic, double h, double floor, double tol = 1e-4) {
    GradCheck out;
    // fd(step, kink) evaluates the central difference at one step size.
    // Round-off in a central difference grows as 1/step, so the floor does too.
    auto rel_err = [&](double a, double v, double step) {
      return std::abs(a - v) / std::max({std::abs(a), std::abs(v), floor * h / step});
    };
    auto record = [&](const std::string& name, double a, auto&& fd) {
      ++out.checked;
      bool kink = false;
      double step = h, value = fd(step, kink);
      if (kink) {
        ++out.straddled;
        while (kink && rel_err(a, value, step) >= tol && step > h * 1e-4 * 1.5) {
          step /= 10.0;
          kink = false;
          value = fd(step, kink);
        }
        if (kink && rel_err(a, value, step) >= tol) {
          ++out.unresolved;
          return;
        }
      }
      const double rel = rel_err(a, value, step);
      if (rel > out.max_rel_err || out.worst.empty()) {
        out.max_rel_err = std::max(out.max_rel_err, rel);
        char buf[96];
        std::snprintf(buf, sizeof buf, " analytic %.6e fd %.6e step %.0e", a, value, step);
        out.worst = name + buf;
      }
    };

    // Head parameters.
    for (std::size_t li = 0; li < p_.head.size(); ++li) {
      for (int which = 0; which < 2; ++which) {
        const Eigen::Index rows = p_.head[li].weight.rows(), cols = which == 0 ? p_.head[li].weight.cols() : 1;
        for (Eigen::Index r = 0; r < rows; ++r)
          for (Eigen::Index c = 0; c < cols; ++c) {
            const double a = which == 0 ? analytic.head[li].weight(r, c) : analytic.head[li].bias(r);
            record("head." + std::to_string(li) + (which ? ".bias" : ".weight"), a, [&](double step, bool& kink) {
              auto head = p_.head;
              double& t = which == 0 ? head[li].weight(r, c) : head[li].bias(r);
              const double orig = t;
              t = orig + step;
              const double lp = head_loss(global_, head, &kink, &global_);
              t = orig - step;
              const double lm = head_loss(global_, head, &kink, &global_);
              return (lp - lm) / (2 * step);
            });
          }
      }
    }

    // Encoder parameters.
    const std::size_t L = p_.encoder.size();
    for (std::size_t l = 0; l < L; ++l) {
      const Eigen::MatrixXd& W = p_.encoder[l].weight;
      for (Eigen::Index r = 0; r < W.rows(); ++r) {
        // Contenders for step h remain valid for every smaller step.
        const std::vector<Eigen::Index> pts = l + 2 >= L ? all_points() : contenders(l, r, h);
        for (Eigen::Index c = -1; c < W.cols(); ++c) {
          const double a = c < 0 ? analytic.encoder[l].bias(r) : analytic.encoder[l].weight(r, c);
          record("encoder." + std::to_string(l) + (c < 0 ? ".bias" : ".weight") + "[" + std::to_string(r) + "," +
                     std::to_string(c) + "]",
                 a, [&](double step, bool& kink) {
                   const double lp = encoder_loss(l, r, c, +step, pts, kink);
                   const double lm = encoder_loss(l, r, c, -step, pts, kink);
                   return (lp - lm) / (2 * step);
                 });
        }
      }
    }
    return out;
  }

 private:
  std::vector<Eigen::Index> all_points() const {
    std::vector<Eigen::Index> v(static_cast<std::size_t>(acts_[0].cols()));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<Eigen::Index>(i);
    return v;
  }

  std::vector<Eigen::Index> contenders(std::size_t l, Eigen::Index r, double h) const {
    const double m = std::max(1.0, acts_[l].cwiseAbs().maxCoeff());
    Eigen::VectorXd bound = p_.encoder[l + 1].weight.col(r).cwiseAbs() * (h * m);
    for (std::size_t k = l + 2; k < p_.encoder.size(); ++k) bound = p_.encoder[k].weight.cwiseAbs() * bound;
    const Eigen::MatrixXd& last = acts_.back();
    std::vector<Eigen::Index> pts;
    for (Eigen::Index p = 0; p < last.cols(); ++p)
      for (Eigen::Index ch = 0; ch < last.rows(); ++ch)
        if (last(ch, p) >= global_(ch) - 2.0 * bound(ch)) {
          pts.push_back(p);
          break;
        }
    return pts;
  }

  double encoder_loss(std::size_t l, Eigen::Index r, Eigen::Index c, double dh, const std::vector<Eigen::Index>& pts,
                      bool& kink) const {
    const auto np = static_cast<Eigen::Index>(pts.size());
    const std::size_t L = p_.encoder.size();
    // New row r of layer l over the selected points.
    Eigen::RowVectorXd zrow(np), arow_old(np);
    for (Eigen::Index j = 0; j < np; ++j) {
      const Eigen::Index p = pts[static_cast<std::size_t>(j)];
      const double in = c < 0 ? 1.0 : acts_[l](c, p);
      zrow(j) = pre_[l](r, p) + dh * in;
      if ((zrow(j) > 0.0) != (pre_[l](r, p) > 0.0)) kink = true;
      arow_old(j) = acts_[l + 1](r, p);
    }
    const Eigen::RowVectorXd delta = zrow.cwiseMax(0.0) - arow_old;

    Eigen::MatrixXd act;  // output of the last recomputed layer, over pts
    if (l + 1 == L) {
      act.resize(acts_[L].rows(), np);
      for (Eigen::Index j = 0; j < np; ++j) act.col(j) = acts_[L].col(pts[static_cast<std::size_t>(j)]);
      act.row(r) += delta;
    } else {
      Eigen::MatrixXd z(pre_[l + 1].rows(), np);
      for (Eigen::Index j = 0; j < np; ++j) z.col(j) = pre_[l + 1].col(pts[static_cast<std::size_t>(j)]);
      z += p_.encoder[l + 1].weight.col(r) * delta;
      note_flips(z, l + 1, pts, kink);
      act = z.cwiseMax(0.0);
      for (std::size_t k = l + 2; k < L; ++k) {
        Eigen::MatrixXd zk = p_.encoder[k].weight * act;
        zk.colwise() += p_.encoder[k].bias;
        note_flips(zk, k, pts, kink);
        act = zk.cwiseMax(0.0);
      }
    }
    Eigen::VectorXd g = global_;
    for (Eigen::Index ch = 0; ch < act.rows(); ++ch) {
      Eigen::Index best = 0;
      double v = act(ch, 0);
      for (Eigen::Index j = 1; j < np; ++j)
        if (act(ch, j) > v) {
          v = act(ch, j);
          best = j;
        }
      g(ch) = v;
      if (acts_[L](ch, pts[static_cast<std::size_t>(best)]) != global_(ch)) kink = true;  // argmax moved
    }
    return head_loss(g, p_.head, &kink, &global_);
  }

  // Sign changes of pre-activations at points that feed some channel maximum.
  void note_flips(const Eigen::MatrixXd& z, std::size_t layer, const std::vector<Eigen::Index>& pts, bool& kink) const {
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
      const Eigen::Index p = pts[static_cast<std::size_t>(j)];
      if (!feeds_max(p)) continue;
      for (Eigen::Index k = 0; k < z.rows(); ++k)
        if ((z(k, j) > 0.0) != (pre_[layer](k, p) > 0.0)) {
          kink = true;
          return;
        }
    }
  }

  bool feeds_max(Eigen::Index p) const {
    const Eigen::MatrixXd& last = acts_.back();
    for (Eigen::Index ch = 0; ch < last.rows(); ++ch)
      if (last(ch, p) == global_(ch)) return true;
    return false;
  }

  const ModelParams<double>& p_;
  Labels52 y_;
  std::vector<Eigen::MatrixXd> acts_;  // acts_[0] = features, acts_[l + 1] = post-ReLU of layer l
  std::vector<Eigen::MatrixXd> pre_;
  Eigen::VectorXd global_;
};

/// Standardised random features and labels for a gradient check.
struct GradProblem {
  ModelParams<double> params;
  Eigen::MatrixXd features;
  Labels52 labels{};
};

inline GradProblem grad_problem(std::uint64_t seed, Eigen::Index points, const Architecture& arch = {}) {
  GradProblem g;
  Rng rng(seed);
  g.params = init_params(arch, rng);
  // Non-zero biases so that every code path carries weight.
  g.params.for_each_tensor([&](const std::string& name, auto& t) {
    if (name.find("bias") != std::string::npos)
      for (Eigen::Index i = 0; i < t.size(); ++i) t(i) = uniform(rng, -0.1, 0.1);
  });
  g.features.resize(arch.input_dim, points);
  for (Eigen::Index i = 0; i < g.features.size(); ++i) g.features(i) = normal01(rng);
  for (auto& y : g.labels) y = static_cast<std::uint8_t>(uniform_index(rng, 2));
  return g;
}

}  // namespace onh::test
