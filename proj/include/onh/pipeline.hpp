#pragma once

#include <onh/cohort.hpp>
#include <onh/dvc.hpp>
#include <onh/experiment.hpp>
#include <onh/geometry.hpp>
#include <onh/strain.hpp>

#include <json.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace onh {

struct ProcessingConfig {
  DvcConfig dvc;
  double smooth_sigma = 1.0;  // nodes
  double min_confidence = 0.3;
  int knn_k = kDefaultKnnK;
  double crop_radius_mm = kDefaultCropRadiusMm;

  void validate() const;
};

struct ProcessedSubject {
  BmoPlane plane;
  OnhPointCloud cloud;  // aligned, cropped, no strain
  DisplacementField displacement;
  StrainField strain;
  OnhPointCloud attributed;  // cloud with DVC strain
};

/// extract -> align -> crop, DVC -> fill -> smooth -> strain, then KNN attach.
ProcessedSubject process_subject(const SubjectRecord& subject, const ProcessingConfig& cfg);

/// Generates and processes a whole cohort in memory.
Dataset build_dataset(const CohortSpec& spec, const ProcessingConfig& cfg);

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names = {"gen-cohort", "extract", "dvc", "attach",
                                                 "train",      "ablate",  "report"};
  return names;
}

inline constexpr std::uint64_t kDefaultSeed = 20240501;

struct PipelineConfig {
  std::filesystem::path out_dir = "onh-run";
  std::uint64_t seed = kDefaultSeed;
  CohortSpec cohort = [] {
    CohortSpec c;
    c.seed = kDefaultSeed;
    return c;
  }();
  ProcessingConfig processing;
  ExperimentConfig training = [] {
    ExperimentConfig t;
    t.seed = kDefaultSeed;
    return t;
  }();
  std::map<std::string, bool> stages;  // toggles for `run`; absent = enabled
  int train_fold = 0;                  // fold trained by the `train` stage

  void validate() const;
  bool stage_enabled(const std::string& name) const;
};

/// Parses a config document; unknown fields and bad types raise ConfigError.
/// The top-level seed, when present, seeds the cohort and training unless
/// those sections carry their own seed.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const PipelineConfig& base = {});
nlohmann::json to_json(const PipelineConfig& cfg);

/// Hash of the configuration sections a stage depends on.
std::string stage_config_hash(const std::string& stage, const PipelineConfig& cfg);

struct StageResult {
  std::string stage;
  bool skipped = false;  // outputs already current
  std::vector<std::filesystem::path> outputs;
  double seconds = 0.0;
  std::string message;
};

/// Runs one stage. Outputs are written atomically; a repeat run whose config,
/// inputs and outputs all hash-match is a no-op.
StageResult run_stage(const std::string& name, const PipelineConfig& cfg);

/// Human-readable ablation summary (the `report` stage body).
std::string format_report(const nlohmann::json& ablation);

/// Per-stage wall-clock seconds, in stage order.
std::string format_timings(const nlohmann::json& timings);

/// Fixed-width per-fold comparison table.
std::string format_summary_table(const AblationReport& rep);

/// Exit status used by the CLI for an exception escaping a stage.
int exit_code_for(const std::exception& e);

}  // namespace onh
