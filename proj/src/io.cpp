#include <onh/io.hpp>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "binary artifacts are written in host order, which must be little-endian");

namespace onh::io {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string hash_bytes(std::string_view bytes) { return hex64(fnv1a64(bytes)); }

std::string hash_file(const fs::path& p) { return hash_bytes(read_file(p)); }

void atomic_write(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact(path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(path.string(), std::string("malformed JSON: ") + e.what());
  }
}

void write_json(const fs::path& path, const json& j) { atomic_write(path, j.dump(2) + "\n"); }

namespace {

template <typename T>
std::string_view as_bytes(const std::vector<T>& v) {
  return {reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T)};
}

template <typename T>
std::vector<T> from_bytes(const std::string& bytes, std::size_t expected, const fs::path& src) {
  if (bytes.size() != expected * sizeof(T))
    throw Error("unexpected payload size in " + src.string());
  std::vector<T> out(expected);
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

fs::path sibling(const fs::path& manifest, const std::string& suffix) {
  fs::path p = manifest;
  p.replace_extension(suffix);
  return p;
}

json grid_json(const NodeGrid& g) {
  return {{"origin", {g.origin.x(), g.origin.y(), g.origin.z()}},
          {"stride", g.stride},
          {"dims", g.dims},
          {"spacing_mm", {g.spacing.x(), g.spacing.y(), g.spacing.z()}}};
}

NodeGrid grid_from_json(const json& j) {
  NodeGrid g;
  const auto o = j.at("origin").get<std::array<int, 3>>();
  g.origin = {o[0], o[1], o[2]};
  g.stride = j.at("stride").get<int>();
  g.dims = j.at("dims").get<Dims>();
  const auto s = j.at("spacing_mm").get<std::array<double, 3>>();
  g.spacing = {s[0], s[1], s[2]};
  return g;
}

std::vector<double> read_records(const fs::path& manifest, const json& j, std::size_t fields,
                                 Eigen::Index nodes) {
  const fs::path data = manifest.parent_path() / j.at("data").get<std::string>();
  return from_bytes<double>(read_file(data), fields * static_cast<std::size_t>(nodes), data);
}

}  // namespace

void write_volume(const fs::path& manifest, const LabeledVolume& vol, const std::string& config_hash) {
  vol.validate();
  const fs::path inten = sibling(manifest, ".intensity.raw");
  const fs::path labels = sibling(manifest, ".labels.raw");
  atomic_write(inten, as_bytes(vol.intensity));
  atomic_write(labels, as_bytes(vol.labels));
  json j = {{"dims", vol.dims},
            {"spacing_mm", {vol.spacing.x(), vol.spacing.y(), vol.spacing.z()}},
            {"dtype", "float32"},
            {"axes", "xyz"},
            {"data", inten.filename().string()},
            {"labels", {{"dtype", "uint8"}, {"data", labels.filename().string()}}},
            {"config_hash", config_hash}};
  write_json(manifest, j);
}

LabeledVolume read_volume(const fs::path& manifest) {
  const json j = read_json(manifest);
  if (j.value("axes", "xyz") != "xyz") throw Error("unsupported axis order in " + manifest.string());
  if (j.at("dtype") != "float32") throw Error("unsupported volume dtype in " + manifest.string());
  const auto dims = j.at("dims").get<Dims>();
  const auto sp = j.at("spacing_mm").get<std::array<double, 3>>();
  LabeledVolume vol(dims, {sp[0], sp[1], sp[2]});
  const fs::path dir = manifest.parent_path();
  const fs::path inten = dir / j.at("data").get<std::string>();
  const fs::path labels = dir / j.at("labels").at("data").get<std::string>();
  vol.intensity = from_bytes<float>(read_file(inten), vol.size(), inten);
  vol.labels = from_bytes<std::uint8_t>(read_file(labels), vol.size(), labels);
  vol.validate();
  return vol;
}

void write_cloud(const fs::path& path, const OnhPointCloud& cloud, const std::string& config_hash) {
  cloud.validate();
  std::vector<std::string> fields = {"x", "y", "z", "tissue", "thickness"};
  if (cloud.strain) fields.push_back("strain");
  const json header = {{"count", cloud.size()},
                       {"fields", fields},
                       {"dtype", "float64"},
                       {"frame", to_string(cloud.frame)},
                       {"config_hash", config_hash}};
  std::string out = header.dump() + "\n";
  std::vector<double> rec;
  rec.reserve(static_cast<std::size_t>(cloud.size()) * fields.size());
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    rec.push_back(cloud.points(0, i));
    rec.push_back(cloud.points(1, i));
    rec.push_back(cloud.points(2, i));
    rec.push_back(cloud.tissue[static_cast<std::size_t>(i)]);
    rec.push_back(cloud.thickness(i));
    if (cloud.strain) rec.push_back((*cloud.strain)(i));
  }
  out.append(as_bytes(rec));
  atomic_write(path, out);
}

OnhPointCloud read_cloud(const fs::path& path, std::string* config_hash) {
  const std::string bytes = read_file(path);
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw Error("point-cloud header missing in " + path.string());
  const json header = json::parse(bytes.substr(0, nl));
  const auto count = header.at("count").get<Eigen::Index>();
  const auto fields = header.at("fields").get<std::vector<std::string>>();
  const bool strain = fields.size() == 6 && fields[5] == "strain";
  if (fields.size() != (strain ? 6u : 5u)) throw Error("unsupported point-cloud fields in " + path.string());
  const std::string payload = bytes.substr(nl + 1);
  const auto rec = from_bytes<double>(payload, static_cast<std::size_t>(count) * fields.size(), path);

  OnhPointCloud c;
  c.frame = frame_from_string(header.at("frame").get<std::string>());
  c.points.resize(3, count);
  c.thickness.resize(count);
  c.tissue.resize(static_cast<std::size_t>(count));
  if (strain) c.strain = Eigen::VectorXd(count);
  const std::size_t w = fields.size();
  for (Eigen::Index i = 0; i < count; ++i) {
    const double* r = &rec[static_cast<std::size_t>(i) * w];
    c.points.col(i) << r[0], r[1], r[2];
    c.tissue[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(r[3]);
    c.thickness(i) = r[4];
    if (strain) (*c.strain)(i) = r[5];
  }
  if (config_hash) *config_hash = header.value("config_hash", "");
  c.validate();
  return c;
}

void write_displacement(const fs::path& manifest, const DisplacementField& f, const std::string& config_hash) {
  f.validate();
  const fs::path data = sibling(manifest, ".raw");
  std::vector<double> rec;
  rec.reserve(static_cast<std::size_t>(f.grid.count()) * 4);
  for (Eigen::Index n = 0; n < f.grid.count(); ++n) {
    rec.insert(rec.end(), {f.vectors(0, n), f.vectors(1, n), f.vectors(2, n), f.confidence(n)});
  }
  atomic_write(data, as_bytes(rec));
  write_json(manifest, {{"grid", grid_json(f.grid)},
                        {"dtype", "float64"},
                        {"record_fields", {"ux", "uy", "uz", "confidence"}},
                        {"units", "voxels"},
                        {"data", data.filename().string()},
                        {"config_hash", config_hash}});
}

DisplacementField read_displacement(const fs::path& manifest) {
  const json j = read_json(manifest);
  DisplacementField f;
  f.grid = grid_from_json(j.at("grid"));
  const auto rec = read_records(manifest, j, 4, f.grid.count());
  f.vectors.resize(3, f.grid.count());
  f.confidence.resize(f.grid.count());
  for (Eigen::Index n = 0; n < f.grid.count(); ++n) {
    const double* r = &rec[static_cast<std::size_t>(n) * 4];
    f.vectors.col(n) << r[0], r[1], r[2];
    f.confidence(n) = r[3];
  }
  f.validate();
  return f;
}

void write_strain(const fs::path& manifest, const StrainField& f, const std::string& config_hash) {
  f.validate();
  const fs::path data = sibling(manifest, ".raw");
  std::vector<double> rec;
  rec.reserve(static_cast<std::size_t>(f.grid.count()) * 7);
  for (Eigen::Index n = 0; n < f.grid.count(); ++n) {
    for (int c = 0; c < 6; ++c) rec.push_back(f.tensors(c, n));
    rec.push_back(f.effective(n));
  }
  atomic_write(data, as_bytes(rec));
  write_json(manifest, {{"grid", grid_json(f.grid)},
                        {"dtype", "float64"},
                        {"record_fields", {"exx", "eyy", "ezz", "exy", "exz", "eyz", "effective"}},
                        {"data", data.filename().string()},
                        {"config_hash", config_hash}});
}

StrainField read_strain(const fs::path& manifest) {
  const json j = read_json(manifest);
  StrainField f;
  f.grid = grid_from_json(j.at("grid"));
  const auto rec = read_records(manifest, j, 7, f.grid.count());
  f.tensors.resize(6, f.grid.count());
  f.effective.resize(f.grid.count());
  for (Eigen::Index n = 0; n < f.grid.count(); ++n) {
    const double* r = &rec[static_cast<std::size_t>(n) * 7];
    for (int c = 0; c < 6; ++c) f.tensors(c, n) = r[c];
    f.effective(n) = r[6];
  }
  f.validate();
  return f;
}

json to_json(const Architecture& a) {
  return {{"input_dim", a.input_dim}, {"encoder", a.encoder}, {"head", a.head}};
}

Architecture architecture_from_json(const json& j) {
  Architecture a;
  a.input_dim = j.at("input_dim").get<int>();
  a.encoder = j.at("encoder").get<std::vector<int>>();
  a.head = j.at("head").get<std::vector<int>>();
  a.validate();
  return a;
}

void write_checkpoint(const fs::path& manifest, const Checkpoint& ck) {
  const fs::path blob = sibling(manifest, ".bin");
  const VectorX<double> flat = ck.params.flatten();
  atomic_write(blob, std::string_view(reinterpret_cast<const char*>(flat.data()),
                                      static_cast<std::size_t>(flat.size()) * sizeof(double)));
  json layout = json::array();
  Eigen::Index off = 0;
  ck.params.for_each_tensor([&](const std::string& name, const auto& t) {
    layout.push_back({{"name", name}, {"shape", {t.rows(), t.cols()}}, {"offset", off}});
    off += t.size();
  });
  std::vector<double> means(ck.scaler.mean.data(), ck.scaler.mean.data() + kInputFeatures);
  std::vector<double> stds(ck.scaler.stddev.data(), ck.scaler.stddev.data() + kInputFeatures);
  write_json(manifest, {{"arch", to_json(ck.params.arch)},
                        {"layout", layout},
                        {"order", "row-major"},
                        {"dtype", "float64"},
                        {"data", blob.filename().string()},
                        {"feature_means", means},
                        {"feature_stds", stds},
                        {"seed", ck.seed},
                        {"epoch", ck.epoch},
                        {"config_hash", ck.config_hash}});
}

Checkpoint read_checkpoint(const fs::path& manifest) {
  const json j = read_json(manifest);
  Checkpoint ck;
  const Architecture arch = architecture_from_json(j.at("arch"));
  Rng dummy(0);
  ck.params = init_params(arch, dummy);
  const fs::path blob = manifest.parent_path() / j.at("data").get<std::string>();
  const auto flat = from_bytes<double>(read_file(blob), static_cast<std::size_t>(ck.params.parameter_count()), blob);
  ck.params.unflatten(Eigen::Map<const VectorX<double>>(flat.data(), static_cast<Eigen::Index>(flat.size())));
  const auto means = j.at("feature_means").get<std::vector<double>>();
  const auto stds = j.at("feature_stds").get<std::vector<double>>();
  for (int d = 0; d < kInputFeatures; ++d) {
    ck.scaler.mean(d) = means.at(static_cast<std::size_t>(d));
    ck.scaler.stddev(d) = stds.at(static_cast<std::size_t>(d));
  }
  ck.seed = j.at("seed").get<std::uint64_t>();
  ck.epoch = j.at("epoch").get<int>();
  ck.config_hash = j.value("config_hash", "");
  return ck;
}

namespace {

// Typed field reader: missing keys keep `out`, wrong types raise ConfigError.
template <typename T>
void read_field(const json& j, const char* key, const std::string& prefix, T& out) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) throw std::invalid_argument("expected boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!it->is_number_integer()) throw std::invalid_argument("expected integer");
      if (std::is_unsigned_v<T> && !it->is_number_unsigned() && it->get<std::int64_t>() < 0)
        throw std::invalid_argument("expected non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw std::invalid_argument("expected number");
    }
    out = it->get<T>();
  } catch (const std::exception& e) {
    throw ConfigError(prefix + key, e.what());
  }
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& prefix) {
  if (!j.is_object()) throw ConfigError(prefix.empty() ? "<root>" : prefix, "expected object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError(prefix + k, "unknown field");
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  return {{"seed", c.seed},         {"folds", c.folds},
          {"epochs", c.epochs},     {"lr", c.lr},
          {"batch", c.batch},       {"max_crop_deg", c.max_crop_deg},
          {"max_rotation_deg", c.max_rotation_deg},
          {"threshold", c.threshold}, {"use_strain", c.use_strain},
          {"points", c.points},     {"arch", to_json(c.arch)}};
}

ExperimentConfig experiment_config_from_json(const json& j, const ExperimentConfig& base) {
  reject_unknown(j, {"seed", "folds", "epochs", "lr", "batch", "max_crop_deg", "max_rotation_deg",
                     "threshold", "use_strain", "points", "arch"},
                 "training.");
  ExperimentConfig c = base;
  read_field(j, "seed", "training.", c.seed);
  read_field(j, "folds", "training.", c.folds);
  read_field(j, "epochs", "training.", c.epochs);
  read_field(j, "lr", "training.", c.lr);
  read_field(j, "batch", "training.", c.batch);
  read_field(j, "max_crop_deg", "training.", c.max_crop_deg);
  read_field(j, "max_rotation_deg", "training.", c.max_rotation_deg);
  read_field(j, "threshold", "training.", c.threshold);
  read_field(j, "use_strain", "training.", c.use_strain);
  read_field(j, "points", "training.", c.points);
  if (j.contains("arch")) {
    try {
      c.arch = architecture_from_json(j.at("arch"));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError("training.arch", e.what());
    }
  }
  c.validate();
  return c;
}

json to_json(const CohortSpec& s) {
  const auto& m = s.labels;
  return {{"n_subjects", s.n_subjects},
          {"seed", s.seed},
          {"dims", s.dims},
          {"spacing_mm", {s.spacing.x(), s.spacing.y(), s.spacing.z()}},
          {"md_range", {s.md_min, s.md_max}},
          {"md_mean", s.md_mean},
          {"md_sd", s.md_sd},
          {"strain_range", {s.strain_min, s.strain_max}},
          {"strain_sector_spread", s.strain_sector_spread},
          {"lateral_ratio", s.lateral_ratio},
          {"cup_radius_range", {s.cup_radius_min, s.cup_radius_max}},
          {"bmo_radius", s.bmo_radius},
          {"texture_sigma", s.texture_sigma},
          {"sector_map", s.sector_map},
          {"label_model",
           {{"alpha", m.alpha}, {"beta", m.beta}, {"gamma", m.gamma}, {"bias", m.bias},
            {"noise_sd", m.noise_sd}, {"strain_ref", m.strain_ref}, {"strain_scale", m.strain_scale},
            {"thickness_ref", m.thickness_ref}, {"thickness_scale", m.thickness_scale},
            {"severity_ref", m.severity_ref}, {"severity_scale", m.severity_scale}}}};
}

CohortSpec cohort_spec_from_json(const json& j, const CohortSpec& base) {
  reject_unknown(j, {"n_subjects", "seed", "dims", "spacing_mm", "md_range", "md_mean", "md_sd",
                     "strain_range", "strain_sector_spread", "lateral_ratio", "cup_radius_range",
                     "bmo_radius", "texture_sigma", "sector_map", "label_model"},
                 "cohort.");
  CohortSpec s = base;
  const std::string p = "cohort.";
  read_field(j, "n_subjects", p, s.n_subjects);
  read_field(j, "seed", p, s.seed);
  read_field(j, "md_mean", p, s.md_mean);
  read_field(j, "md_sd", p, s.md_sd);
  read_field(j, "strain_sector_spread", p, s.strain_sector_spread);
  read_field(j, "lateral_ratio", p, s.lateral_ratio);
  read_field(j, "bmo_radius", p, s.bmo_radius);
  read_field(j, "texture_sigma", p, s.texture_sigma);
  try {
    if (j.contains("dims")) s.dims = j.at("dims").get<Dims>();
    if (j.contains("spacing_mm")) {
      const auto v = j.at("spacing_mm").get<std::array<double, 3>>();
      s.spacing = {v[0], v[1], v[2]};
    }
    if (j.contains("md_range")) {
      const auto v = j.at("md_range").get<std::array<double, 2>>();
      s.md_min = v[0];
      s.md_max = v[1];
    }
    if (j.contains("strain_range")) {
      const auto v = j.at("strain_range").get<std::array<double, 2>>();
      s.strain_min = v[0];
      s.strain_max = v[1];
    }
    if (j.contains("cup_radius_range")) {
      const auto v = j.at("cup_radius_range").get<std::array<double, 2>>();
      s.cup_radius_min = v[0];
      s.cup_radius_max = v[1];
    }
    if (j.contains("sector_map")) s.sector_map = j.at("sector_map").get<SectorMap>();
  } catch (const json::exception& e) {
    throw ConfigError("cohort", e.what());
  }
  if (j.contains("label_model")) {
    const json& m = j.at("label_model");
    const std::string q = "cohort.label_model.";
    reject_unknown(m, {"alpha", "beta", "gamma", "bias", "noise_sd", "strain_ref", "strain_scale",
                       "thickness_ref", "thickness_scale", "severity_ref", "severity_scale"},
                   q);
    auto& l = s.labels;
    read_field(m, "alpha", q, l.alpha);
    read_field(m, "beta", q, l.beta);
    read_field(m, "gamma", q, l.gamma);
    read_field(m, "bias", q, l.bias);
    read_field(m, "noise_sd", q, l.noise_sd);
    read_field(m, "strain_ref", q, l.strain_ref);
    read_field(m, "strain_scale", q, l.strain_scale);
    read_field(m, "thickness_ref", q, l.thickness_ref);
    read_field(m, "thickness_scale", q, l.thickness_scale);
    read_field(m, "severity_ref", q, l.severity_ref);
    read_field(m, "severity_scale", q, l.severity_scale);
  }
  s.validate();
  return s;
}

json to_json(const Metrics& m) {
  return {{"tp", m.tp},   {"fp", m.fp},
          {"fn", m.fn},   {"tn", m.tn},
          {"precision", m.precision}, {"recall", m.recall},
          {"f1", m.f1},   {"subject_f1", m.subject_f1}};
}

json to_json(const FoldReport& r) {
  return {{"fold", r.fold},
          {"use_strain", r.use_strain},
          {"seed", r.seed},
          {"config_hash", r.config_hash},
          {"initial_train_loss", r.initial_train_loss},
          {"train_loss", r.train_loss},
          {"val_loss", r.val_loss},
          {"best_epoch", r.best_epoch},
          {"best_val_loss", r.best_val_loss},
          {"test", to_json(r.test)}};
}

json to_json(const AblationReport& r) {
  json with = json::array(), without = json::array();
  for (const auto& f : r.with_strain) with.push_back(to_json(f));
  for (const auto& f : r.without_strain) without.push_back(to_json(f));
  return {{"reference",
           {{"note", "clinical reference values (238 subjects), not reproducible on synthetic data"},
            {"f1_with_strain", "0.76 +/- 0.02"},
            {"f1_without_strain", "0.71 +/- 0.02"}}},
          {"shared_config_hash", r.shared_config_hash},
          {"f1_with_strain", r.f1_with},
          {"f1_without_strain", r.f1_without},
          {"mean_with", r.mean_with},
          {"sd_with", r.sd_with},
          {"mean_without", r.mean_without},
          {"sd_without", r.sd_without},
          {"subject_f1_with", r.subject_f1_with},
          {"subject_f1_without", r.subject_f1_without},
          {"t", r.ttest.t},
          {"p", r.ttest.p},
          {"df", r.ttest.df},
          {"alpha", kSignificanceLevel},
          {"significant", r.significant},
          {"strain_better", r.strain_better},
          {"pass", r.pass()},
          {"folds_with_strain", with},
          {"folds_without_strain", without}};
}

json to_json(const SplitPlan& p) {
  json folds = json::array();
  for (const auto& f : p.folds) folds.push_back({{"train", f.train}, {"val", f.val}, {"test", f.test}});
  return {{"seed", p.seed}, {"folds", folds}};
}

}  // namespace onh::io
