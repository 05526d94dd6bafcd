#pragma once

#include <onh/common.hpp>
#include <onh/geometry.hpp>

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace onh {

inline constexpr int kVisualFieldPoints = 52;
inline constexpr int kInputFeatures = 5;  // x, y, z, thickness, effective strain
inline constexpr double kDefaultThreshold = 0.5;
inline constexpr double kBceClip = 1e-7;

template <typename S>
using MatrixX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using VectorX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

/// Shared per-point encoder widths followed by the head widths. The last head
/// width is the number of visual-field outputs.
struct Architecture {
  int input_dim = kInputFeatures;
  std::vector<int> encoder{64, 64, 128, 256};
  std::vector<int> head{128, kVisualFieldPoints};

  void validate() const;
  bool operator==(const Architecture&) const = default;
};

template <typename S>
struct DenseLayer {
  MatrixX<S> weight;  // out x in
  VectorX<S> bias;
};

template <typename S>
struct ModelParams {
  Architecture arch;
  std::vector<DenseLayer<S>> encoder;
  std::vector<DenseLayer<S>> head;

  Eigen::Index parameter_count() const {
    Eigen::Index n = 0;
    for (const auto* layers : {&encoder, &head})
      for (const auto& l : *layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  /// Calls fn(name, tensor) for every weight and bias in layout order.
  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    visit(*this, fn);
  }

  template <typename T>
  ModelParams<T> cast() const {
    ModelParams<T> out;
    out.arch = arch;
    for (const auto& l : encoder) out.encoder.push_back({l.weight.template cast<T>(), l.bias.template cast<T>()});
    for (const auto& l : head) out.head.push_back({l.weight.template cast<T>(), l.bias.template cast<T>()});
    return out;
  }

  ModelParams zeros_like() const {
    ModelParams out = *this;
    out.for_each_tensor([](const std::string&, auto& t) { t.setZero(); });
    return out;
  }

  /// Row-major weights, then biases, layer by layer (encoder first).
  VectorX<S> flatten() const {
    VectorX<S> flat(parameter_count());
    Eigen::Index off = 0;
    for_each_tensor([&](const std::string&, const auto& t) {
      for (Eigen::Index r = 0; r < t.rows(); ++r)
        for (Eigen::Index c = 0; c < t.cols(); ++c) flat(off++) = t(r, c);
    });
    return flat;
  }

  void unflatten(const VectorX<S>& flat) {
    if (flat.size() != parameter_count()) throw Error("parameter blob size mismatch");
    Eigen::Index off = 0;
    for_each_tensor([&](const std::string&, auto& t) {
      for (Eigen::Index r = 0; r < t.rows(); ++r)
        for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = flat(off++);
    });
  }

  bool all_finite() const {
    bool ok = true;
    for_each_tensor([&](const std::string&, const auto& t) { ok = ok && t.allFinite(); });
    return ok;
  }

 private:
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn& fn) {
    for (std::size_t i = 0; i < self.encoder.size(); ++i) {
      fn("encoder." + std::to_string(i) + ".weight", self.encoder[i].weight);
      fn("encoder." + std::to_string(i) + ".bias", self.encoder[i].bias);
    }
    for (std::size_t i = 0; i < self.head.size(); ++i) {
      fn("head." + std::to_string(i) + ".weight", self.head[i].weight);
      fn("head." + std::to_string(i) + ".bias", self.head[i].bias);
    }
  }
};

/// Glorot-uniform weights, zero biases.
ModelParams<double> init_params(const Architecture& arch, Rng& rng);

/// Per-feature standardisation fitted on training clouds.
struct FeatureScaler {
  Eigen::Matrix<double, kInputFeatures, 1> mean = Eigen::Matrix<double, kInputFeatures, 1>::Zero();
  Eigen::Matrix<double, kInputFeatures, 1> stddev = Eigen::Matrix<double, kInputFeatures, 1>::Ones();

  static FeatureScaler fit(const std::vector<const OnhPointCloud*>& clouds);
};

/// Standardised (x, y, z, thickness, strain) columns, one per point. With
/// use_strain == false, or no strain attribute, the strain row is zero.
template <typename S>
MatrixX<S> make_features(const OnhPointCloud& cloud, const FeatureScaler& scaler, bool use_strain) {
  MatrixX<S> f(kInputFeatures, cloud.size());
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    for (int d = 0; d < 3; ++d)
      f(d, i) = static_cast<S>((cloud.points(d, i) - scaler.mean(d)) / scaler.stddev(d));
    f(3, i) = static_cast<S>((cloud.thickness(i) - scaler.mean(3)) / scaler.stddev(3));
    f(4, i) = (use_strain && cloud.strain)
                  ? static_cast<S>(((*cloud.strain)(i) - scaler.mean(4)) / scaler.stddev(4))
                  : S(0);
  }
  return f;
}

template <typename S>
S sigmoid(S z) {
  const S p = S(1) / (S(1) + std::exp(-z));
  return std::clamp(p, std::numeric_limits<S>::min(), S(1) - std::numeric_limits<S>::epsilon() / S(2));
}

/// Points are encoded in blocks of this width. Every block has the same
/// shape (the last one is padded), so a point's activations do not depend on
/// where it sits in the cloud.
inline constexpr Eigen::Index kPointBlock = 64;

template <typename S>
struct EncoderWorkspace {
  MatrixX<S> input;              // input_dim x block
  std::vector<MatrixX<S>> act;   // post-ReLU, width x block per layer

  explicit EncoderWorkspace(const ModelParams<S>& params)
      : input(params.arch.input_dim, kPointBlock), act(params.encoder.size()) {
    for (std::size_t l = 0; l < act.size(); ++l) act[l].resize(params.encoder[l].weight.rows(), kPointBlock);
  }
};

/// Runs the encoder over features.col(cols[i]) block by block, calling
/// visit(ws, first, count) after each block.
template <typename S, typename Visit>
void encode_points(const ModelParams<S>& params, const MatrixX<S>& features,
                   std::span<const Eigen::Index> cols, EncoderWorkspace<S>& ws, Visit&& visit) {
  const auto n = static_cast<Eigen::Index>(cols.size());
  for (Eigen::Index first = 0; first < n; first += kPointBlock) {
    const Eigen::Index count = std::min(kPointBlock, n - first);
    for (Eigen::Index j = 0; j < kPointBlock; ++j)
      ws.input.col(j) = features.col(cols[static_cast<std::size_t>(first + std::min(j, count - 1))]);
    const MatrixX<S>* in = &ws.input;
    for (std::size_t l = 0; l < params.encoder.size(); ++l) {
      MatrixX<S>& a = ws.act[l];
      a.noalias() = params.encoder[l].weight * *in;
      a.colwise() += params.encoder[l].bias;
      a = a.cwiseMax(S(0));
      in = &a;
    }
    visit(ws, first, count);
  }
}

/// Activations kept for the backward pass. Encoder activations are not
/// stored; backward re-encodes the argmax points.
template <typename S>
struct ForwardTrace {
  VectorX<S> global;                 // channel-wise max over points
  std::vector<Eigen::Index> argmax;  // lowest point index attaining the max
  std::vector<VectorX<S>> head_act;  // post-ReLU hidden head layers
  VectorX<S> logits;
  VectorX<S> probs;
};

/// Shared encoder, max-pool, head. `features` is input_dim x n.
template <typename S>
ForwardTrace<S> forward_trace(const ModelParams<S>& params, const MatrixX<S>& features) {
  if (features.cols() == 0) throw Error("forward needs at least one point");
  if (features.rows() != params.arch.input_dim) throw Error("feature width mismatch");
  ForwardTrace<S> tr;
  const Eigen::Index width = params.encoder.back().weight.rows();
  tr.global.resize(width);
  tr.argmax.assign(static_cast<std::size_t>(width), 0);
  std::vector<Eigen::Index> cols(static_cast<std::size_t>(features.cols()));
  std::iota(cols.begin(), cols.end(), Eigen::Index{0});
  EncoderWorkspace<S> ws(params);
  encode_points(params, features, std::span<const Eigen::Index>(cols), ws,
                [&](const EncoderWorkspace<S>& w, Eigen::Index first, Eigen::Index count) {
                  const MatrixX<S>& last = w.act.back();
                  for (Eigen::Index j = 0; j < count; ++j)
                    for (Eigen::Index c = 0; c < width; ++c)
                      if (first + j == 0 || last(c, j) > tr.global(c)) {
                        tr.global(c) = last(c, j);
                        tr.argmax[static_cast<std::size_t>(c)] = first + j;
                      }
                });
  VectorX<S> h = tr.global;
  for (std::size_t i = 0; i + 1 < params.head.size(); ++i) {
    h = (params.head[i].weight * h + params.head[i].bias).cwiseMax(S(0));
    tr.head_act.push_back(h);
  }
  tr.logits = params.head.back().weight * h + params.head.back().bias;
  tr.probs = tr.logits.unaryExpr([](S z) { return sigmoid(z); });
  return tr;
}

/// Output probabilities for one cloud.
template <typename S>
VectorX<S> forward(const ModelParams<S>& params, const MatrixX<S>& features) {
  return forward_trace(params, features).probs;
}

/// Mean binary cross-entropy with probabilities clipped to [1e-7, 1 - 1e-7].
template <typename S, typename Labels>
S bce_loss(const VectorX<S>& probs, const Labels& labels) {
  if (static_cast<std::size_t>(probs.size()) != static_cast<std::size_t>(labels.size()))
    throw Error("bce_loss length mismatch");
  const S lo = S(kBceClip), hi = S(1) - S(kBceClip);
  S total = 0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    const S p = std::clamp(probs(i), lo, hi);
    const S y = static_cast<S>(labels[static_cast<std::size_t>(i)]);
    total -= y * std::log(p) + (S(1) - y) * std::log(S(1) - p);
  }
  return total / static_cast<S>(probs.size());
}

template <typename S>
struct Gradients {
  S loss = 0;
  VectorX<S> probs;
  ModelParams<S> grads;
};

/// Exact reverse-mode gradient of bce_loss(forward(params, features), labels).
/// Max-pool routes each channel's gradient to its argmax point, so only those
/// points are back-propagated through the encoder.
template <typename S, typename Labels>
Gradients<S> backward(const ModelParams<S>& params, const MatrixX<S>& features,
                      const Labels& labels) {
  const ForwardTrace<S> tr = forward_trace(params, features);
  const auto m = tr.probs.size();
  if (static_cast<std::size_t>(labels.size()) != static_cast<std::size_t>(m))
    throw Error("label length mismatch");

  Gradients<S> out;
  out.loss = bce_loss(tr.probs, labels);
  out.probs = tr.probs;
  out.grads = params.zeros_like();

  const S lo = S(kBceClip), hi = S(1) - S(kBceClip);
  VectorX<S> delta(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const S p = tr.probs(i);
    const S y = static_cast<S>(labels[static_cast<std::size_t>(i)]);
    delta(i) = (p > lo && p < hi) ? (p - y) / static_cast<S>(m) : S(0);
  }

  // Head, last layer first.
  for (std::size_t li = params.head.size(); li-- > 0;) {
    const VectorX<S>& input = li == 0 ? tr.global : tr.head_act[li - 1];
    out.grads.head[li].weight.noalias() = delta * input.transpose();
    out.grads.head[li].bias = delta;
    VectorX<S> up = params.head[li].weight.transpose() * delta;
    if (li > 0) up = (input.array() > S(0)).select(up, S(0));
    delta = std::move(up);
  }
  // delta is now dL/d(global). Gather the argmax points.
  std::vector<Eigen::Index> pts = tr.argmax;
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  const auto np = static_cast<Eigen::Index>(pts.size());
  auto slot = [&](Eigen::Index p) {
    return static_cast<Eigen::Index>(std::lower_bound(pts.begin(), pts.end(), p) - pts.begin());
  };

  const std::size_t layers = params.encoder.size();
  std::vector<MatrixX<S>> acts(layers + 1);
  acts[0].resize(features.rows(), np);
  for (Eigen::Index j = 0; j < np; ++j) acts[0].col(j) = features.col(pts[static_cast<std::size_t>(j)]);
  for (std::size_t l = 0; l < layers; ++l) acts[l + 1].resize(params.encoder[l].weight.rows(), np);
  EncoderWorkspace<S> ws(params);
  encode_points(params, features, std::span<const Eigen::Index>(pts), ws,
                [&](const EncoderWorkspace<S>& w, Eigen::Index first, Eigen::Index count) {
                  for (std::size_t l = 0; l < layers; ++l)
                    acts[l + 1].middleCols(first, count) = w.act[l].leftCols(count);
                });

  MatrixX<S> dact = MatrixX<S>::Zero(acts[layers].rows(), np);
  for (Eigen::Index c = 0; c < dact.rows(); ++c)
    dact(c, slot(tr.argmax[static_cast<std::size_t>(c)])) = delta(c);

  for (std::size_t l = layers; l-- > 0;) {
    const MatrixX<S> dz = (acts[l + 1].array() > S(0)).select(dact, S(0));
    out.grads.encoder[l].weight.noalias() = dz * acts[l].transpose();
    out.grads.encoder[l].bias = dz.rowwise().sum();
    if (l > 0) dact.noalias() = params.encoder[l].weight.transpose() * dz;
  }
  return out;
}

/// Accumulates `src` into `dst` (same layout).
template <typename S>
void add_into(ModelParams<S>& dst, const ModelParams<S>& src, S scale = S(1)) {
  for (std::size_t i = 0; i < dst.encoder.size(); ++i) {
    dst.encoder[i].weight += scale * src.encoder[i].weight;
    dst.encoder[i].bias += scale * src.encoder[i].bias;
  }
  for (std::size_t i = 0; i < dst.head.size(); ++i) {
    dst.head[i].weight += scale * src.head[i].weight;
    dst.head[i].bias += scale * src.head[i].bias;
  }
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename S>
struct AdamState {
  ModelParams<S> m, v;
  long step = 0;

  static AdamState for_params(const ModelParams<S>& p) {
    return {p.zeros_like(), p.zeros_like(), 0};
  }
};

/// One bias-corrected Adam update in place.
template <typename S>
void adam_step(ModelParams<S>& params, const ModelParams<S>& grads, AdamState<S>& state,
               double lr, const AdamConfig& cfg = {}) {
  if (state.m.encoder.size() != params.encoder.size()) state = AdamState<S>::for_params(params);
  state.step += 1;
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  const S c1 = static_cast<S>(1.0 - std::pow(cfg.beta1, static_cast<double>(state.step)));
  const S c2 = static_cast<S>(1.0 - std::pow(cfg.beta2, static_cast<double>(state.step)));
  const S rate = static_cast<S>(lr), eps = static_cast<S>(cfg.eps);

  auto update = [&](auto& theta, const auto& g, auto& m, auto& v) {
    if (theta.rows() != g.rows() || theta.cols() != g.cols())
      throw Error("adam_step shape mismatch");
    m = b1 * m + (S(1) - b1) * g;
    v = b2 * v + (S(1) - b2) * g.cwiseAbs2();
    theta.array() -= rate * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  };
  if (grads.encoder.size() != params.encoder.size() || grads.head.size() != params.head.size())
    throw Error("adam_step shape mismatch");
  for (std::size_t i = 0; i < params.encoder.size(); ++i) {
    update(params.encoder[i].weight, grads.encoder[i].weight, state.m.encoder[i].weight,
           state.v.encoder[i].weight);
    update(params.encoder[i].bias, grads.encoder[i].bias, state.m.encoder[i].bias,
           state.v.encoder[i].bias);
  }
  for (std::size_t i = 0; i < params.head.size(); ++i) {
    update(params.head[i].weight, grads.head[i].weight, state.m.head[i].weight,
           state.v.head[i].weight);
    update(params.head[i].bias, grads.head[i].bias, state.m.head[i].bias, state.v.head[i].bias);
  }
}

using Labels52 = std::array<std::uint8_t, kVisualFieldPoints>;

/// 52-point 24-2 defect map.
struct VisualFieldMap {
  Labels52 labels{};
  std::optional<std::array<double, kVisualFieldPoints>> probs;

  void validate() const;
};

/// 1 where prob >= threshold.
template <typename Derived>
Labels52 predict(const Eigen::MatrixBase<Derived>& probs, double threshold = kDefaultThreshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw Error("threshold must lie in (0, 1)");
  if (probs.size() != kVisualFieldPoints) throw Error("predict expects 52 probabilities");
  Labels52 out{};
  for (int i = 0; i < kVisualFieldPoints; ++i)
    out[static_cast<std::size_t>(i)] = static_cast<double>(probs(i)) >= threshold ? 1 : 0;
  return out;
}

}  // namespace onh
