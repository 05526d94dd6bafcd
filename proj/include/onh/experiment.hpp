#pragma once

#include <onh/common.hpp>
#include <onh/geometry.hpp>
#include <onh/pointnet.hpp>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace onh {

inline constexpr int kDefaultFolds = 5;
inline constexpr double kSignificanceLevel = 0.05;

/// One subject ready for learning: aligned, cropped cloud with thickness and
/// strain, and its 52 defect labels.
struct Sample {
  std::string id;
  OnhPointCloud cloud;
  Labels52 labels{};
  double severity_md = 0.0;
};
using Dataset = std::vector<Sample>;

struct AugmentConfig {
  bool crop = true;
  double max_crop_deg = 45.0;
  double max_rotation_deg = 360.0;
  int points = kDefaultResamplePoints;
  int min_points_after_crop = 100;
  int crop_retries = 5;
};

/// Random angular-sector crop, random rotation about z, resample to
/// cfg.points. Point attributes are never modified.
OnhPointCloud augment(const OnhPointCloud& cloud, Rng& rng, const AugmentConfig& cfg = {});

struct Fold {
  std::vector<std::string> train, val, test;
};

struct SplitPlan {
  std::uint64_t seed = 0;
  std::vector<Fold> folds;
};

/// Shuffles once, orders by defect-count tercile, deals into 2 * folds slices
/// and rotates: fold f tests slice f and validates on slice f + folds.
/// Without defect counts every subject falls in one stratum.
SplitPlan make_splits(const std::vector<std::string>& subject_ids, std::uint64_t seed,
                      std::span<const int> defect_counts = {}, int folds = kDefaultFolds);

/// Run configuration (also the JSON run-config schema).
struct ExperimentConfig {
  std::uint64_t seed = 7;
  int folds = kDefaultFolds;
  int epochs = 40;
  double lr = 1e-3;
  int batch = 8;
  double max_crop_deg = 45.0;
  double max_rotation_deg = 360.0;
  double threshold = kDefaultThreshold;
  bool use_strain = true;
  int points = kDefaultResamplePoints;
  Architecture arch;

  void validate() const;
  AugmentConfig augment() const;
};

/// Stable hash of the configuration; `include_strain_flag = false` gives the
/// hash shared by both ablation arms.
std::string config_hash(const ExperimentConfig& cfg, bool include_strain_flag = true);

struct Metrics {
  long tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  double subject_f1 = 0.0;  // mean of per-subject F1
};

/// Pooled (micro) precision, recall and F1 over all decisions; zero
/// divisions give 0.
Metrics confusion_metrics(std::span<const Labels52> predicted, std::span<const Labels52> truth);

struct FoldReport {
  int fold = 0;
  bool use_strain = true;
  std::uint64_t seed = 0;
  std::string config_hash;
  double initial_train_loss = 0.0;
  std::vector<double> train_loss;  // per epoch
  std::vector<double> val_loss;    // per epoch
  int best_epoch = -1;             // 0-based
  double best_val_loss = 0.0;
  Metrics test;
};

struct TrainedModel {
  ModelParams<double> params;
  FeatureScaler scaler;
  FoldReport report;
};

/// Feature matrix of a deterministic fixed-size evaluation subsample.
MatrixX<double> evaluation_features(const OnhPointCloud& cloud, const FeatureScaler& scaler,
                                    bool use_strain, int points, std::uint64_t seed);

/// Adam on augmented training clouds; returns the snapshot with the lowest
/// validation BCE. Throws NumericError on a non-finite loss.
TrainedModel train_model(const Dataset& data, const Fold& fold, const ExperimentConfig& cfg,
                         int fold_index = 0);

/// Thresholded predictions of every test subject, pooled into Metrics.
Metrics evaluate(const ModelParams<double>& params, const FeatureScaler& scaler,
                 const std::vector<const Sample*>& test_set, const ExperimentConfig& cfg);

struct TTest {
  double t = 0.0;
  double p = 1.0;
  int df = 0;
};

/// Two-sided paired t test on a - b.
TTest paired_t_test(std::span<const double> a, std::span<const double> b);

/// Student t cumulative distribution.
double student_t_cdf(double t, double df);

/// Regularised incomplete beta I_x(a, b) by continued fraction.
double incomplete_beta(double a, double b, double x);

struct AblationReport {
  std::string shared_config_hash;
  std::vector<FoldReport> with_strain;
  std::vector<FoldReport> without_strain;
  std::vector<double> f1_with, f1_without;
  double mean_with = 0.0, sd_with = 0.0, mean_without = 0.0, sd_without = 0.0;
  double subject_f1_with = 0.0, subject_f1_without = 0.0;
  TTest ttest;
  bool significant = false;   // p < 0.05
  bool strain_better = false; // mean F1 with strain > without
  bool pass() const { return significant && strain_better; }
};

/// Trains and tests both arms on identical splits and seeds.
/// `zero_strain_both` feeds zero strain to both arms (null comparison).
AblationReport run_ablation(const Dataset& data, const ExperimentConfig& cfg,
                            bool zero_strain_both = false);

double mean(std::span<const double> v);
double sample_sd(std::span<const double> v);

}  // namespace onh
