#include <onh/experiment.hpp>
#include <onh/io.hpp>
#include <onh/parallel.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>

namespace onh {

OnhPointCloud augment(const OnhPointCloud& cloud, Rng& rng, const AugmentConfig& cfg) {
  if (cloud.frame != Frame::bmo_aligned) throw Error("augment expects a bmo-aligned cloud");
  if (cloud.size() < 1) throw Error("augment needs at least one point");

  std::vector<Eigen::Index> kept(static_cast<std::size_t>(cloud.size()));
  std::iota(kept.begin(), kept.end(), Eigen::Index{0});

  if (cfg.crop && cfg.max_crop_deg > 0.0) {
    double width = uniform(rng, 0.0, cfg.max_crop_deg);
    const double start = uniform(rng, 0.0, 360.0);
    for (int attempt = 0; attempt <= cfg.crop_retries; ++attempt) {
      std::vector<Eigen::Index> trial;
      trial.reserve(kept.size());
      for (Eigen::Index i = 0; i < cloud.size(); ++i) {
        double deg = std::atan2(cloud.points(1, i), cloud.points(0, i)) * 180.0 / std::numbers::pi;
        double rel = std::fmod(deg - start + 720.0, 360.0);
        if (!(rel < width)) trial.push_back(i);
      }
      if (static_cast<int>(trial.size()) >= cfg.min_points_after_crop) {
        kept.swap(trial);
        break;
      }
      width *= 0.5;  // retry with a narrower sector; give up after the last retry
    }
  }

  const double angle = uniform(rng, 0.0, cfg.max_rotation_deg) * std::numbers::pi / 180.0;
  const auto pick = resample_indices(static_cast<Eigen::Index>(kept.size()), cfg.points, rng);
  std::vector<Eigen::Index> idx(pick.size());
  for (std::size_t i = 0; i < pick.size(); ++i) idx[i] = kept[static_cast<std::size_t>(pick[i])];

  OnhPointCloud out = cloud.subset(idx);
  const double c = std::cos(angle), s = std::sin(angle);
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    const double x = out.points(0, i), y = out.points(1, i);
    out.points(0, i) = c * x - s * y;
    out.points(1, i) = s * x + c * y;
  }
  return out;
}

SplitPlan make_splits(const std::vector<std::string>& ids, std::uint64_t seed,
                      std::span<const int> defect_counts, int folds) {
  const int n = static_cast<int>(ids.size());
  if (folds < 2) throw Error("need at least 2 folds");
  if (n < 2 * folds) throw Error("make_splits needs at least " + std::to_string(2 * folds) + " subjects");
  if (!defect_counts.empty() && static_cast<int>(defect_counts.size()) != n)
    throw Error("defect counts must match subject ids");

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (int i = n - 1; i > 0; --i)
    std::swap(order[static_cast<std::size_t>(i)],
              order[uniform_index(rng, static_cast<std::uint64_t>(i + 1))]);

  if (!defect_counts.empty()) {
    // Tercile of each subject's defect count, by rank.
    std::vector<int> rank(order.begin(), order.end());
    std::stable_sort(rank.begin(), rank.end(), [&](int a, int b) {
      return defect_counts[static_cast<std::size_t>(a)] < defect_counts[static_cast<std::size_t>(b)];
    });
    std::vector<int> tercile(static_cast<std::size_t>(n));
    for (int r = 0; r < n; ++r) tercile[static_cast<std::size_t>(rank[static_cast<std::size_t>(r)])] = 3 * r / n;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return tercile[static_cast<std::size_t>(a)] < tercile[static_cast<std::size_t>(b)];
    });
  }

  const int slices = 2 * folds;
  std::vector<std::vector<std::string>> slice(static_cast<std::size_t>(slices));
  for (int i = 0; i < n; ++i)
    slice[static_cast<std::size_t>(i % slices)].push_back(ids[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);

  SplitPlan plan;
  plan.seed = seed;
  for (int f = 0; f < folds; ++f) {
    Fold fold;
    fold.test = slice[static_cast<std::size_t>(f)];
    fold.val = slice[static_cast<std::size_t>(f + folds)];
    for (int s = 0; s < slices; ++s)
      if (s != f && s != f + folds)
        fold.train.insert(fold.train.end(), slice[static_cast<std::size_t>(s)].begin(),
                          slice[static_cast<std::size_t>(s)].end());
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

void ExperimentConfig::validate() const {
  if (folds < 2) throw ConfigError("training.folds", "must be >= 2");
  if (epochs < 1) throw ConfigError("training.epochs", "must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("training.lr", "must be positive");
  if (batch < 1) throw ConfigError("training.batch", "must be >= 1");
  if (max_crop_deg < 0.0 || max_crop_deg >= 360.0) throw ConfigError("training.max_crop_deg", "must lie in [0, 360)");
  if (max_rotation_deg < 0.0 || max_rotation_deg > 360.0)
    throw ConfigError("training.max_rotation_deg", "must lie in [0, 360]");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("training.threshold", "must lie in (0, 1)");
  if (points < 1) throw ConfigError("training.points", "must be >= 1");
  try {
    arch.validate();
  } catch (const Error& e) {
    throw ConfigError("training.arch", e.what());
  }
}

AugmentConfig ExperimentConfig::augment() const {
  AugmentConfig a;
  a.crop = max_crop_deg > 0.0;
  a.max_crop_deg = max_crop_deg;
  a.max_rotation_deg = max_rotation_deg;
  a.points = points;
  return a;
}

std::string config_hash(const ExperimentConfig& cfg, bool include_strain_flag) {
  auto j = io::to_json(cfg);
  if (!include_strain_flag) j.erase("use_strain");
  return io::hash_bytes(j.dump());
}

Metrics confusion_metrics(std::span<const Labels52> predicted, std::span<const Labels52> truth) {
  if (predicted.size() != truth.size()) throw Error("prediction/label count mismatch");
  if (predicted.empty()) throw Error("empty test set");
  auto ratio = [](double a, double b) { return b > 0.0 ? a / b : 0.0; };
  auto f1_of = [&](double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; };

  Metrics m;
  double subject_sum = 0.0;
  for (std::size_t s = 0; s < predicted.size(); ++s) {
    long tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t j = 0; j < kVisualFieldPoints; ++j) {
      const bool p = predicted[s][j] != 0, t = truth[s][j] != 0;
      tp += p && t;
      fp += p && !t;
      fn += !p && t;
      tn += !p && !t;
    }
    m.tp += tp;
    m.fp += fp;
    m.fn += fn;
    m.tn += tn;
    subject_sum += f1_of(ratio(tp, tp + fp), ratio(tp, tp + fn));
  }
  m.precision = ratio(static_cast<double>(m.tp), static_cast<double>(m.tp + m.fp));
  m.recall = ratio(static_cast<double>(m.tp), static_cast<double>(m.tp + m.fn));
  m.f1 = f1_of(m.precision, m.recall);
  m.subject_f1 = subject_sum / static_cast<double>(predicted.size());
  return m;
}

MatrixX<double> evaluation_features(const OnhPointCloud& cloud, const FeatureScaler& scaler,
                                    bool use_strain, int points, std::uint64_t seed) {
  Rng rng(seed);
  return make_features<double>(resample(cloud, points, rng), scaler, use_strain);
}

namespace {

std::uint64_t eval_seed(const ExperimentConfig& cfg, const std::string& id) {
  return split_seed(cfg.seed ^ 0xe7a1u, io::fnv1a64(id));
}

template <typename S>
S mean_loss(const ModelParams<S>& params, const std::vector<MatrixX<S>>& feats,
            const std::vector<const Labels52*>& labels) {
  S total = 0;
  for (std::size_t i = 0; i < feats.size(); ++i) total += bce_loss(forward(params, feats[i]), *labels[i]);
  return feats.empty() ? S(0) : total / static_cast<S>(feats.size());
}

}  // namespace

TrainedModel train_model(const Dataset& data, const Fold& fold, const ExperimentConfig& cfg,
                         int fold_index) {
  cfg.validate();
  using S = float;
  std::map<std::string, const Sample*> by_id;
  for (const auto& s : data) by_id[s.id] = &s;
  auto lookup = [&](const std::vector<std::string>& ids) {
    std::vector<const Sample*> out;
    for (const auto& id : ids) {
      const auto it = by_id.find(id);
      if (it == by_id.end()) throw Error("split references unknown subject " + id);
      out.push_back(it->second);
    }
    return out;
  };
  const auto train = lookup(fold.train);
  const auto val = lookup(fold.val);
  if (train.empty()) throw Error("training set is empty");

  TrainedModel result;
  std::vector<const OnhPointCloud*> clouds;
  for (const auto* s : train) clouds.push_back(&s->cloud);
  result.scaler = FeatureScaler::fit(clouds);

  const std::uint64_t seed = split_seed(cfg.seed, static_cast<std::uint64_t>(fold_index));
  Rng init_rng(split_seed(seed, 1));
  ModelParams<S> params = init_params(cfg.arch, init_rng).cast<S>();
  AdamState<S> adam = AdamState<S>::for_params(params);
  Rng rng(split_seed(seed, 2));
  const AugmentConfig aug = cfg.augment();

  std::vector<MatrixX<S>> val_feats;
  std::vector<const Labels52*> val_labels;
  for (const auto* s : val) {
    val_feats.push_back(evaluation_features(s->cloud, result.scaler, cfg.use_strain, cfg.points,
                                            eval_seed(cfg, s->id))
                            .cast<S>());
    val_labels.push_back(&s->labels);
  }

  FoldReport& rep = result.report;
  rep.fold = fold_index;
  rep.use_strain = cfg.use_strain;
  rep.seed = seed;
  rep.config_hash = config_hash(cfg, false);
  {
    Rng probe(split_seed(seed, 3));
    double total = 0.0;
    for (const auto* s : train)
      total += bce_loss(forward(params, make_features<S>(augment(s->cloud, probe, aug), result.scaler,
                                                         cfg.use_strain)),
                        s->labels);
    rep.initial_train_loss = total / static_cast<double>(train.size());
  }

  ModelParams<S> best = params;
  rep.best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[uniform_index(rng, i)]);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch));
      ModelParams<S> grad = params.zeros_like();
      for (std::size_t i = b; i < end; ++i) {
        const Sample& s = *train[order[i]];
        const auto feats = make_features<S>(augment(s.cloud, rng, aug), result.scaler, cfg.use_strain);
        const Gradients<S> g = backward(params, feats, s.labels);
        add_into(grad, g.grads);
        epoch_loss += g.loss;
      }
      const S inv = S(1) / static_cast<S>(end - b);
      grad.for_each_tensor([inv](const std::string&, auto& t) { t *= inv; });
      adam_step(params, grad, adam, cfg.lr);
    }
    epoch_loss /= static_cast<double>(order.size());
    if (!std::isfinite(epoch_loss) || !params.all_finite())
      throw NumericError("training diverged at epoch " + std::to_string(epoch) + " (fold " +
                         std::to_string(fold_index) + "): non-finite loss or parameters");
    rep.train_loss.push_back(epoch_loss);

    const double vl = val_feats.empty() ? epoch_loss : mean_loss(params, val_feats, val_labels);
    if (!std::isfinite(vl)) throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
    rep.val_loss.push_back(vl);
    if (vl < rep.best_val_loss) {
      rep.best_val_loss = vl;
      rep.best_epoch = epoch;
      best = params;
    }
  }
  result.params = best.cast<double>();
  return result;
}

Metrics evaluate(const ModelParams<double>& params, const FeatureScaler& scaler,
                 const std::vector<const Sample*>& test_set, const ExperimentConfig& cfg) {
  if (test_set.empty()) throw Error("empty test set");
  const ModelParams<float> fp = params.cast<float>();
  std::vector<Labels52> pred, truth;
  for (const auto* s : test_set) {
    const auto feats = evaluation_features(s->cloud, scaler, cfg.use_strain, cfg.points, eval_seed(cfg, s->id));
    pred.push_back(predict(forward(fp, MatrixX<float>(feats.cast<float>())), cfg.threshold));
    truth.push_back(s->labels);
  }
  return confusion_metrics(pred, truth);
}

double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  // Continued fraction converges fast for x < (a+1)/(a+b+2); use symmetry otherwise.
  if (x > (a + 1.0) / (a + b + 2.0)) return 1.0 - incomplete_beta(b, a, 1.0 - x);
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                          b * std::log1p(-x);
  // Modified Lentz.
  constexpr double tiny = 1e-300;
  double f = 1.0, c = 1.0, d = 0.0;
  for (int i = 0; i <= 400; ++i) {
    const int m = i / 2;
    double num;
    if (i == 0) num = 1.0;
    else if (i % 2 == 0) num = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
    else num = -((a + m) * (a + b + m) * x) / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
    d = 1.0 + num * d;
    if (std::fabs(d) < tiny) d = tiny;
    d = 1.0 / d;
    c = 1.0 + num / c;
    if (std::fabs(c) < tiny) c = tiny;
    const double cd = c * d;
    f *= cd;
    if (std::fabs(1.0 - cd) < 1e-15) return std::exp(ln_front) * (f - 1.0) / a;
  }
  throw NumericError("incomplete beta continued fraction did not converge");
}

double student_t_cdf(double t, double df) {
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double x = df / (df + t * t);
  const double tail = 0.5 * incomplete_beta(0.5 * df, 0.5, x);
  return t > 0 ? 1.0 - tail : tail;
}

double mean(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_sd(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

TTest paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw Error("paired t test needs equal samples of size >= 2");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  TTest r;
  r.df = static_cast<int>(d.size()) - 1;
  const double md = mean(d), sd = sample_sd(d);
  if (!(sd > 0.0)) {
    if (md == 0.0) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = md > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
    }
    return r;
  }
  r.t = md / (sd / std::sqrt(static_cast<double>(d.size())));
  r.p = std::clamp(incomplete_beta(0.5 * r.df, 0.5, r.df / (r.df + r.t * r.t)), 0.0, 1.0);
  return r;
}

AblationReport run_ablation(const Dataset& data, const ExperimentConfig& cfg, bool zero_strain_both) {
  cfg.validate();
  for (const auto& s : data)
    if (!s.cloud.has_strain()) throw Error("ablation needs strain attributes on every subject (" + s.id + ")");

  std::vector<std::string> ids;
  std::vector<int> defects;
  for (const auto& s : data) {
    ids.push_back(s.id);
    defects.push_back(std::accumulate(s.labels.begin(), s.labels.end(), 0));
  }
  const SplitPlan plan = make_splits(ids, cfg.seed, defects, cfg.folds);

  ExperimentConfig with = cfg, without = cfg;
  with.use_strain = !zero_strain_both;
  without.use_strain = false;

  AblationReport rep;
  rep.shared_config_hash = config_hash(cfg, false);
  rep.with_strain.resize(static_cast<std::size_t>(cfg.folds));
  rep.without_strain.resize(static_cast<std::size_t>(cfg.folds));

  std::map<std::string, const Sample*> by_id;
  for (const auto& s : data) by_id[s.id] = &s;

  parallel_for(static_cast<std::size_t>(2 * cfg.folds), [&](std::size_t task) {
    const int f = static_cast<int>(task / 2);
    const bool strain_arm = task % 2 == 0;
    const ExperimentConfig& arm = strain_arm ? with : without;
    const Fold& fold = plan.folds[static_cast<std::size_t>(f)];
    TrainedModel m = train_model(data, fold, arm, f);
    std::vector<const Sample*> test;
    for (const auto& id : fold.test) test.push_back(by_id.at(id));
    m.report.test = evaluate(m.params, m.scaler, test, arm);
    (strain_arm ? rep.with_strain : rep.without_strain)[static_cast<std::size_t>(f)] = std::move(m.report);
  });

  double sw = 0.0, so = 0.0;
  for (int f = 0; f < cfg.folds; ++f) {
    rep.f1_with.push_back(rep.with_strain[static_cast<std::size_t>(f)].test.f1);
    rep.f1_without.push_back(rep.without_strain[static_cast<std::size_t>(f)].test.f1);
    sw += rep.with_strain[static_cast<std::size_t>(f)].test.subject_f1;
    so += rep.without_strain[static_cast<std::size_t>(f)].test.subject_f1;
  }
  rep.subject_f1_with = sw / cfg.folds;
  rep.subject_f1_without = so / cfg.folds;
  rep.mean_with = mean(rep.f1_with);
  rep.sd_with = sample_sd(rep.f1_with);
  rep.mean_without = mean(rep.f1_without);
  rep.sd_without = sample_sd(rep.f1_without);
  rep.ttest = paired_t_test(rep.f1_with, rep.f1_without);
  rep.significant = rep.ttest.p < kSignificanceLevel;
  rep.strain_better = rep.mean_with > rep.mean_without;
  return rep;
}

}  // namespace onh
