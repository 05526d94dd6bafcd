#include <onh/pointnet.hpp>

namespace onh {

void Architecture::validate() const {
  if (encoder.empty() || head.empty()) throw Error("architecture has no layers");
  if (input_dim < 1) throw Error("architecture input width must be positive");
  for (int w : encoder)
    if (w < 1) throw Error("layer widths must be positive");
  for (int w : head)
    if (w < 1) throw Error("layer widths must be positive");
  if (head.back() != kVisualFieldPoints) throw Error("final width must be 52");
}

ModelParams<double> init_params(const Architecture& arch, Rng& rng) {
  arch.validate();
  ModelParams<double> p;
  p.arch = arch;
  auto make = [&](int in, int out) {
    DenseLayer<double> l;
    const double bound = std::sqrt(6.0 / (in + out));
    l.weight.resize(out, in);
    // Row-major draw order matches the flattened layout.
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c) l.weight(r, c) = uniform(rng, -bound, bound);
    l.bias = VectorX<double>::Zero(out);
    return l;
  };
  int in = arch.input_dim;
  for (int w : arch.encoder) {
    p.encoder.push_back(make(in, w));
    in = w;
  }
  for (int w : arch.head) {
    p.head.push_back(make(in, w));
    in = w;
  }
  return p;
}

FeatureScaler FeatureScaler::fit(const std::vector<const OnhPointCloud*>& clouds) {
  FeatureScaler s;
  Eigen::Matrix<double, kInputFeatures, 1> sum = decltype(sum)::Zero(), sum2 = decltype(sum)::Zero();
  double n = 0.0, n_strain = 0.0;
  for (const auto* c : clouds) {
    for (Eigen::Index i = 0; i < c->size(); ++i) {
      for (int d = 0; d < 3; ++d) {
        sum(d) += c->points(d, i);
        sum2(d) += c->points(d, i) * c->points(d, i);
      }
      sum(3) += c->thickness(i);
      sum2(3) += c->thickness(i) * c->thickness(i);
      if (c->strain) {
        const double e = (*c->strain)(i);
        sum(4) += e;
        sum2(4) += e * e;
        n_strain += 1.0;
      }
    }
    n += static_cast<double>(c->size());
  }
  if (n == 0.0) throw Error("cannot fit feature statistics on empty data");
  for (int d = 0; d < kInputFeatures; ++d) {
    const double cnt = d == 4 ? n_strain : n;
    if (cnt == 0.0) continue;
    const double mean = sum(d) / cnt;
    const double var = std::max(0.0, sum2(d) / cnt - mean * mean);
    s.mean(d) = mean;
    s.stddev(d) = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  return s;
}

void VisualFieldMap::validate() const {
  for (auto l : labels)
    if (l > 1) throw Error("visual field labels must be 0 or 1");
  if (probs)
    for (double p : *probs)
      if (!(p > 0.0 && p < 1.0)) throw Error("visual field probabilities must lie in (0, 1)");
}

}  // namespace onh
