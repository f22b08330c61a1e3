// octa — command line front end for the anomaly detection pipeline.
//
// Usage: octa <stage> --config <file> [--seed N] [--profile desk|paper]
// Stages: synth preprocess train-features fit-svm segment categorize
//         classify eval, plus `run` to execute every toggled stage.

#include <CLI11.hpp>
#include <cstdio>
#include <optional>
#include <string>

#include "octa/errors.hpp"
#include "octa/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Anomaly detection and categorization for layered-volume scans"};
  app.set_version_flag("--version", "octa 0.1.0");
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> profile;
  std::optional<std::string> run_dir;

  std::vector<std::string> stage_names = octa::pipe::kStageOrder;
  stage_names.push_back("run");

  std::vector<CLI::App*> subcommands;
  for (const auto& name : stage_names) {
    const std::string desc =
        name == "run" ? "execute every stage toggled on in the config"
                      : "run the " + name + " stage";
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "pipeline config JSON")
        ->envname("OCTA_CONFIG")
        ->required();
    sub->add_option("--seed", seed, "override the config seed")->envname("OCTA_SEED");
    sub->add_option("--profile", profile, "desk or paper defaults")
        ->envname("OCTA_PROFILE");
    sub->add_option("--run-dir", run_dir, "override the run directory")
        ->envname("OCTA_RUN_DIR");
    subcommands.push_back(sub);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    octa::pipe::PipelineConfig config =
        octa::pipe::PipelineConfig::from_file(config_path, seed, profile);
    if (run_dir) config.run_dir = *run_dir;

    const std::string stage = app.get_subcommands().front()->get_name();
    if (stage == "run")
      octa::pipe::run_all(config);
    else
      octa::pipe::run_stage(stage, config);
  } catch (const octa::PrerequisiteError& e) {
    std::fprintf(stderr, "octa: %s\n", e.what());
    return 2;
  } catch (const octa::Error& e) {
    std::fprintf(stderr, "octa: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "octa: unexpected error: %s\n", e.what());
    return 1;
  }
  return 0;
}
