#include <onh/io.hpp>
#include <onh/pipeline.hpp>

#include <CLI11.hpp>

#include <iostream>
#include <optional>

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool no_strain = false;
  std::optional<int> epochs;
  std::optional<int> subjects;
  std::optional<int> fold;
};

onh::PipelineConfig resolve(const Options& o) {
  onh::PipelineConfig cfg;
  if (!o.config.empty()) cfg = onh::pipeline_config_from_json(onh::io::read_json(o.config));
  if (o.seed) {
    cfg.seed = *o.seed;
    cfg.cohort.seed = *o.seed;
    cfg.training.seed = *o.seed;
  }
  if (!o.out.empty()) cfg.out_dir = o.out;
  if (o.no_strain) cfg.training.use_strain = false;
  if (o.epochs) cfg.training.epochs = *o.epochs;
  if (o.subjects) cfg.cohort.n_subjects = *o.subjects;
  if (o.fold) cfg.train_fold = *o.fold;
  cfg.validate();
  return cfg;
}

void print(const onh::StageResult& r) {
  std::cout << r.message << " [" << r.seconds << " s]\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Optic nerve head strain pipeline: synthetic cohort, DVC strain, PointNet VF prediction"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config, "JSON run configuration");
  app.add_option("--seed", o.seed, "Global seed (cohort and training)");
  app.add_option("--out", o.out, "Output directory");
  app.add_flag("--no-strain", o.no_strain, "Zero the strain feature in `train`");
  app.add_option("--epochs", o.epochs, "Training epochs");
  app.add_option("--subjects", o.subjects, "Cohort size");
  app.add_option("--fold", o.fold, "Fold trained by `train`");

  const std::vector<std::pair<std::string, std::string>> help = {
      {"gen-cohort", "Generate the synthetic baseline/deformed cohort"},
      {"extract", "Extract, BMO-align and crop point clouds"},
      {"dvc", "Block-matching displacement and strain fields"},
      {"attach", "Attach KNN-interpolated strain to point clouds"},
      {"train", "Train and test one fold"},
      {"ablate", "Strain vs no-strain comparison over all folds"},
      {"report", "Render the ablation report"}};
  for (const auto& [name, text] : help) app.add_subcommand(name, text);
  app.add_subcommand("run", "Run every enabled stage in order");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const onh::PipelineConfig cfg = resolve(o);
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "run") {
      for (const auto& stage : onh::stage_names())
        if (cfg.stage_enabled(stage)) print(onh::run_stage(stage, cfg));
    } else {
      print(onh::run_stage(cmd, cfg));
    }
    if (cmd == "report" || (cmd == "run" && cfg.stage_enabled("report")))
      std::cout << onh::io::read_file(cfg.out_dir / "report" / "report.txt") << "\n"
                << onh::io::read_file(cfg.out_dir / "report" / "timings.txt");
    if (cmd == "ablate") std::cout << onh::io::read_file(cfg.out_dir / "ablate" / "summary.txt");
    return 0;
  } catch (const std::exception& e) {
    const int rc = onh::exit_code_for(e);
    std::cerr << "error: " << e.what() << "\n";
    return rc;
  }
}
