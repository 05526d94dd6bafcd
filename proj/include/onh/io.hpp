#pragma once

#include <onh/cohort.hpp>
#include <onh/dvc.hpp>
#include <onh/experiment.hpp>
#include <onh/geometry.hpp>
#include <onh/pointnet.hpp>
#include <onh/strain.hpp>
#include <onh/volume.hpp>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace onh::io {

namespace fs = std::filesystem;
using nlohmann::json;

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);
std::string hash_bytes(std::string_view bytes);
std::string hash_file(const fs::path& p);

/// Writes to a sibling temp file and renames over the target.
void atomic_write(const fs::path& path, std::string_view bytes);
/// Throws MissingArtifact when the file does not exist.
std::string read_file(const fs::path& path);
json read_json(const fs::path& path);
void write_json(const fs::path& path, const json& j);

/// Volume: <stem>.json manifest plus <stem>.intensity.raw (float32) and
/// <stem>.labels.raw (uint8), little-endian, x fastest.
void write_volume(const fs::path& manifest, const LabeledVolume& vol, const std::string& config_hash);
LabeledVolume read_volume(const fs::path& manifest);

/// Point cloud: one JSON header line, then `count` records of float64 fields.
void write_cloud(const fs::path& path, const OnhPointCloud& cloud, const std::string& config_hash);
OnhPointCloud read_cloud(const fs::path& path, std::string* config_hash = nullptr);

/// Per-node records (ux, uy, uz, confidence) / (xx, yy, zz, xy, xz, yz,
/// effective), float64, with a JSON manifest.
void write_displacement(const fs::path& manifest, const DisplacementField& f, const std::string& config_hash);
DisplacementField read_displacement(const fs::path& manifest);
void write_strain(const fs::path& manifest, const StrainField& f, const std::string& config_hash);
StrainField read_strain(const fs::path& manifest);

/// Checkpoint: flat float64 blob + JSON layout manifest.
struct Checkpoint {
  ModelParams<double> params;
  FeatureScaler scaler;
  std::uint64_t seed = 0;
  int epoch = 0;
  std::string config_hash;
};
void write_checkpoint(const fs::path& manifest, const Checkpoint& ck);
Checkpoint read_checkpoint(const fs::path& manifest);

json to_json(const Architecture& a);
Architecture architecture_from_json(const json& j);

/// Run-config JSON. Unknown keys and wrong types raise ConfigError naming the field.
json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const json& j, const ExperimentConfig& base = {});

json to_json(const CohortSpec& s);
CohortSpec cohort_spec_from_json(const json& j, const CohortSpec& base = {});

json to_json(const Metrics& m);
json to_json(const FoldReport& r);
json to_json(const AblationReport& r);
json to_json(const SplitPlan& p);

}  // namespace onh::io
