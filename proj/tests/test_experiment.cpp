#include "support.hpp"

#include <onh/experiment.hpp>
#include <onh/io.hpp>

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#ifdef ONH_HAVE_BOOST
#include <boost/math/distributions/students_t.hpp>
#include <boost/math/special_functions/beta.hpp>
#endif

using namespace onh;

namespace {

std::vector<std::string> ids(int n) {
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) out.push_back("S" + std::to_string(i));
  return out;
}

// Points keyed by their thickness so the output can be mapped back to the input.
OnhPointCloud keyed_cloud(Rng& rng, int n) {
  auto c = test::random_cloud(rng, n, Frame::bmo_aligned, true, 1.5);
  for (int i = 0; i < n; ++i) c.thickness(i) = i;
  return c;
}

// A small learnable dataset: the label of every VF point follows the sign of
// the mean strain, which the model sees only through the strain column.
Dataset toy_dataset(int n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  for (int s = 0; s < n; ++s) {
    Sample smp;
    smp.id = "T" + std::to_string(s);
    smp.cloud = test::random_cloud(rng, 200, Frame::bmo_aligned, true, 1.5);
    const bool high = s % 2 == 0;
    smp.cloud.strain->array() = smp.cloud.strain->array() * 0.2 + (high ? 0.03 : 0.005);
    for (std::size_t j = 0; j < kVisualFieldPoints; ++j) smp.labels[j] = high ? (j % 3 != 0) : (j % 7 == 0);
    d.push_back(std::move(smp));
  }
  return d;
}

ExperimentConfig toy_config() {
  ExperimentConfig c;
  c.epochs = 4;
  c.points = 64;
  c.batch = 4;
  c.lr = 3e-3;
  c.arch.encoder = {16, 16, 32, 32};
  c.arch.head = {32, 52};
  return c;
}

}  // namespace

TEST_CASE("augment: size, attribute preservation, rotation about z") {
  Rng rng(1);
  const auto cloud = keyed_cloud(rng, 4000);
  AugmentConfig cfg;
  for (int t = 0; t < 10; ++t) {
    const auto out = augment(cloud, rng, cfg);
    REQUIRE(out.size() == 3000);
    CHECK(out.frame == Frame::bmo_aligned);
    std::set<double> seen;
    for (Eigen::Index i = 0; i < out.size(); ++i) {
      const auto src = static_cast<Eigen::Index>(out.thickness(i));
      seen.insert(out.thickness(i));
      CHECK(out.tissue[static_cast<std::size_t>(i)] == cloud.tissue[static_cast<std::size_t>(src)]);
      CHECK((*out.strain)(i) == (*cloud.strain)(src));
      CHECK(out.points(2, i) == cloud.points(2, src));
      CHECK(std::abs(out.points.col(i).head<2>().norm() - cloud.points.col(src).head<2>().norm()) < 1e-12);
    }
    CHECK(seen.size() == 3000);  // without replacement
  }
}

TEST_CASE("augment without crop or rotation is a pure subsample") {
  Rng rng(2);
  const auto cloud = keyed_cloud(rng, 300);
  AugmentConfig cfg;
  cfg.crop = false;
  cfg.max_rotation_deg = 0.0;
  cfg.points = 300;
  const auto out = augment(cloud, rng, cfg);
  std::vector<double> keys(out.thickness.data(), out.thickness.data() + out.size());
  std::sort(keys.begin(), keys.end());
  for (int i = 0; i < 300; ++i) CHECK(keys[static_cast<std::size_t>(i)] == i);
  for (Eigen::Index i = 0; i < out.size(); ++i)
    CHECK(out.points.col(i) == cloud.points.col(static_cast<Eigen::Index>(out.thickness(i))));
}

TEST_CASE("augment: the angular crop removes one sector, or is skipped") {
  Rng rng(3);
  const auto cloud = keyed_cloud(rng, 2000);
  AugmentConfig cfg;
  cfg.max_rotation_deg = 0.0;
  cfg.points = 100000;  // with replacement: every kept point is drawn
  int cropped = 0;
  for (int t = 0; t < 20; ++t) {
    const auto out = augment(cloud, rng, cfg);
    std::set<double> keys(out.thickness.data(), out.thickness.data() + out.size());
    // Missing points form a single angular interval no wider than 45 degrees.
    std::vector<double> missing;
    for (int i = 0; i < 2000; ++i)
      if (!keys.count(i)) missing.push_back(std::atan2(cloud.points(1, i), cloud.points(0, i)) * 180 / M_PI);
    if (missing.empty()) continue;
    ++cropped;
    std::sort(missing.begin(), missing.end());
    double gap = 360.0 - (missing.back() - missing.front());
    for (std::size_t k = 1; k < missing.size(); ++k) gap = std::max(gap, missing[k] - missing[k - 1]);
    CHECK(360.0 - gap <= 45.0);
  }
  CHECK(cropped > 10);

  // Every point on one ray: any sector containing it empties the cloud, so
  // the crop must fall back to keeping everything.
  auto ray = keyed_cloud(rng, 150);
  for (Eigen::Index i = 0; i < 150; ++i) ray.points.col(i) = Vec3(0.1 + 0.01 * i, 0.0, 0.0);
  cfg.points = 150;
  cfg.max_crop_deg = 359.0;
  for (int t = 0; t < 20; ++t) {
    const auto out = augment(ray, rng, cfg);
    std::set<double> keys(out.thickness.data(), out.thickness.data() + out.size());
    CHECK(keys.size() == 150);
  }
}

TEST_CASE("make_splits: 80/10/10 proportions and partitioning") {
  const auto names = ids(238);
  std::vector<int> counts(238);
  for (int i = 0; i < 238; ++i) counts[static_cast<std::size_t>(i)] = (i * 37) % 53;
  const auto plan = make_splits(names, 99, counts);
  REQUIRE(plan.folds.size() == 5);
  CHECK(plan.folds[0].train.size() == 190);
  CHECK(plan.folds[0].val.size() == 24);
  CHECK(plan.folds[0].test.size() == 24);

  std::multiset<std::string> all_tests;
  for (const auto& f : plan.folds) {
    std::multiset<std::string> u;
    u.insert(f.train.begin(), f.train.end());
    u.insert(f.val.begin(), f.val.end());
    u.insert(f.test.begin(), f.test.end());
    CHECK(u.size() == 238);
    CHECK(std::set<std::string>(u.begin(), u.end()).size() == 238);
    all_tests.insert(f.test.begin(), f.test.end());
  }
  CHECK(std::set<std::string>(all_tests.begin(), all_tests.end()).size() == all_tests.size());

  const auto even = make_splits(ids(120), 7);
  for (const auto& f : even.folds) {
    CHECK(f.train.size() == 96);
    CHECK(f.val.size() == 12);
    CHECK(f.test.size() == 12);
  }

  const auto again = make_splits(names, 99, counts);
  CHECK(io::to_json(again) == io::to_json(plan));
  CHECK(io::to_json(make_splits(names, 100, counts)) != io::to_json(plan));

  CHECK_THROWS_AS(make_splits(ids(9), 1), Error);
  CHECK_THROWS_AS(make_splits(ids(20), 1, std::vector<int>(3)), Error);
}

TEST_CASE("make_splits balances defect terciles across test slices") {
  const auto names = ids(120);
  std::vector<int> counts(120);
  for (int i = 0; i < 120; ++i) counts[static_cast<std::size_t>(i)] = i;  // S0..S39 low, S80..S119 high
  const auto plan = make_splits(names, 5, counts);
  for (const auto& f : plan.folds) {
    int high = 0;
    for (const auto& id : f.test) high += std::stoi(id.substr(1)) >= 80;
    CHECK((high == 4 || high == 3 || high == 5));
  }
}

TEST_CASE("confusion_metrics matches a direct count") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto n = 1 + uniform_index(rng, 8);
    std::vector<Labels52> p(n), t(n);
    long tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t j = 0; j < 52; ++j) {
        p[s][j] = uniform01(rng) < 0.4;
        t[s][j] = uniform01(rng) < 0.5;
        tp += p[s][j] && t[s][j];
        fp += p[s][j] && !t[s][j];
        fn += !p[s][j] && t[s][j];
        tn += !p[s][j] && !t[s][j];
      }
    const auto m = confusion_metrics(p, t);
    CHECK(m.tp == tp);
    CHECK(m.fp == fp);
    CHECK(m.fn == fn);
    CHECK(m.tn == tn);
    const double prec = double(tp) / double(tp + fp), rec = double(tp) / double(tp + fn);
    CHECK(m.precision == prec);
    CHECK(m.recall == rec);
    CHECK(std::abs(m.f1 - 2 * prec * rec / (prec + rec)) < 1e-15);
    CHECK(std::abs(m.f1 - double(2 * tp) / double(2 * tp + fp + fn)) < 1e-15);
  }

  Labels52 ones{}, zeros{};
  ones.fill(1);
  std::vector<Labels52> a{ones}, z{zeros};
  const auto perfect = confusion_metrics(a, a);
  CHECK(perfect.f1 == 1.0);
  CHECK(perfect.subject_f1 == 1.0);
  const auto none = confusion_metrics(z, a);
  CHECK(none.f1 == 0.0);
  CHECK(none.precision == 0.0);
  CHECK(none.fn == 52);
  CHECK_THROWS_AS(confusion_metrics(a, std::vector<Labels52>{}), Error);
  CHECK_THROWS_AS(confusion_metrics(std::vector<Labels52>{}, std::vector<Labels52>{}), Error);
}

TEST_CASE("paired t test: textbook values and degenerate inputs") {
  // Differences 1, 2, 3, 4, 5: mean 3, sd sqrt(2.5), t = 3 / (sqrt(2.5)/sqrt(5)) = 4.2426...
  const std::vector<double> a{2, 4, 6, 8, 10}, b{1, 2, 3, 4, 5};
  const auto r = paired_t_test(a, b);
  CHECK(r.df == 4);
  CHECK(r.t == doctest::Approx(3.0 / std::sqrt(0.5)).epsilon(1e-14));
  CHECK(r.p > 0.01);
  CHECK(r.p < 0.02);

  const auto sym = paired_t_test(b, a);
  CHECK(sym.t == -r.t);
  CHECK(sym.p == doctest::Approx(r.p).epsilon(1e-14));

  const std::vector<double> c{1, 1, 1};
  CHECK(paired_t_test(c, c).p == 1.0);
  CHECK(paired_t_test(c, c).t == 0.0);
  const std::vector<double> d{2, 2, 2};
  CHECK(paired_t_test(d, c).p == 0.0);
  CHECK(std::isinf(paired_t_test(d, c).t));
  CHECK_THROWS_AS(paired_t_test(std::vector<double>{1.0}, std::vector<double>{2.0}), Error);
  CHECK_THROWS_AS(paired_t_test(a, c), Error);

  CHECK(student_t_cdf(0.0, 4) == doctest::Approx(0.5).epsilon(1e-15));
  // df = 1 is the Cauchy distribution.
  for (double t : {-3.0, -0.5, 0.7, 2.0})
    CHECK(std::abs(student_t_cdf(t, 1) - (0.5 + std::atan(t) / M_PI)) < 1e-12);
  // df = 2 has a closed form.
  for (double t : {-2.0, 0.3, 1.7})
    CHECK(std::abs(student_t_cdf(t, 2) - 0.5 * (1 + t / std::sqrt(2 + t * t))) < 1e-12);
  CHECK(incomplete_beta(2, 3, 0.0) == 0.0);
  CHECK(incomplete_beta(2, 3, 1.0) == 1.0);
  // I_x(1, 1) = x and I_x(a, 1) = x^a.
  CHECK(std::abs(incomplete_beta(1, 1, 0.37) - 0.37) < 1e-14);
  CHECK(std::abs(incomplete_beta(3.5, 1, 0.6) - std::pow(0.6, 3.5)) < 1e-13);
}

#ifdef ONH_HAVE_BOOST
TEST_CASE("t test and incomplete beta agree with boost") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const double a = uniform(rng, 0.5, 20), b = uniform(rng, 0.5, 20), x = uniform01(rng);
    CHECK(std::abs(incomplete_beta(a, b, x) - boost::math::ibeta(a, b, x)) < 1e-12);
  }
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 3 + static_cast<int>(uniform_index(rng, 10));
    std::vector<double> x(static_cast<std::size_t>(n)), y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      x[static_cast<std::size_t>(i)] = normal01(rng);
      y[static_cast<std::size_t>(i)] = normal01(rng) + 0.3;
    }
    const auto r = paired_t_test(x, y);
    boost::math::students_t dist(r.df);
    const double p = 2 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
    CHECK(std::abs(r.p - p) < 1e-12);
    CHECK(std::abs(student_t_cdf(r.t, r.df) - boost::math::cdf(dist, r.t)) < 1e-12);
  }
}
#endif

TEST_CASE("config validation and hash") {
  ExperimentConfig c;
  CHECK_NOTHROW(c.validate());
  auto bad = c;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.threshold = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.max_crop_deg = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  auto off = c;
  off.use_strain = false;
  CHECK(config_hash(c) != config_hash(off));
  CHECK(config_hash(c, false) == config_hash(off, false));
  auto other = c;
  other.lr = 2e-3;
  CHECK(config_hash(c, false) != config_hash(other, false));
}

TEST_CASE("train_model: learns the toy task, keeps the best snapshot, is deterministic") {
  const auto data = toy_dataset(20, 1);
  const auto plan = make_splits([&] {
    std::vector<std::string> v;
    for (const auto& s : data) v.push_back(s.id);
    return v;
  }(), 3);
  const auto cfg = toy_config();
  const auto m = train_model(data, plan.folds[0], cfg, 0);
  const auto& r = m.report;
  REQUIRE(r.train_loss.size() == 4);
  REQUIRE(r.val_loss.size() == 4);
  CHECK(r.train_loss.back() < r.initial_train_loss);
  CHECK(r.best_val_loss == *std::min_element(r.val_loss.begin(), r.val_loss.end()));
  CHECK(r.val_loss[static_cast<std::size_t>(r.best_epoch)] == r.best_val_loss);

  const auto again = train_model(data, plan.folds[0], cfg, 0);
  CHECK(again.params.flatten() == m.params.flatten());
  CHECK(again.report.val_loss == r.val_loss);

  auto seeded = cfg;
  seeded.seed = 8;
  CHECK(train_model(data, plan.folds[0], seeded, 0).params.flatten() != m.params.flatten());

  auto broken = data;
  (*broken[0].cloud.strain)(0) = std::numeric_limits<double>::quiet_NaN();
  Fold all;
  for (const auto& s : broken) all.train.push_back(s.id);
  CHECK_THROWS_AS(train_model(broken, all, cfg, 0), NumericError);

  Fold unknown;
  unknown.train = {"nope"};
  CHECK_THROWS_AS(train_model(data, unknown, cfg, 0), Error);
}

TEST_CASE("run_ablation: zeroing strain in both arms gives a null comparison") {
  const auto data = toy_dataset(20, 2);
  auto cfg = toy_config();
  cfg.epochs = 2;
  const auto rep = run_ablation(data, cfg, true);
  CHECK(rep.f1_with == rep.f1_without);
  CHECK(rep.ttest.p == 1.0);
  CHECK_FALSE(rep.pass());
  CHECK(rep.shared_config_hash == config_hash(cfg, false));
  REQUIRE(rep.with_strain.size() == 5);
  for (const auto& f : rep.with_strain) CHECK(f.config_hash == rep.shared_config_hash);

  auto missing = data;
  missing[3].cloud.strain.reset();
  CHECK_THROWS_AS(run_ablation(missing, cfg), Error);
}

TEST_CASE("mean and sample sd") {
  const std::vector<double> v{1, 2, 3, 4};
  CHECK(mean(v) == 2.5);
  CHECK(sample_sd(v) == doctest::Approx(std::sqrt(5.0 / 3.0)).epsilon(1e-15));
}
