#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "octa/neuralnet.hpp"
#include "octa/preprocess.hpp"
#include "octa/synth.hpp"

namespace octa::pipe {

inline const std::vector<std::string> kStageOrder = {
    "synth",     "preprocess", "train-features", "fit-svm",
    "segment",   "categorize", "classify",       "eval"};

/// Fully resolved run configuration. Defaults come from the profile (desk or
/// paper); a JSON config file overrides individual fields. The paper-scale
/// defaults are the published training recipe: encoder widths 2048-1024-512
/// per scale fused into 256 dims, learning rate 1e-4 for 150 epochs then
/// 1e-5 for 150, momentum 0.9, minibatch 50, corruption 0.5, nu grid
/// 0.01,0.1..0.9, cluster counts 2..30, 64 trees. The desk profile shrinks
/// widths by 4x and epochs to 15+15 so a full run fits on a workstation.
struct PipelineConfig {
  std::filesystem::path run_dir = "runs/demo";
  std::filesystem::path manifest;  // defaults to <run_dir>/data/manifest.csv
  std::uint64_t seed = 42;
  std::string profile = "desk";

  // synth
  synth::PhantomConfig phantom;
  std::vector<synth::ClassPlanEntry> plan;

  // preprocess
  prep::SuperpixelMode superpixel_mode = prep::SuperpixelMode::Slic;
  int superpixel_step = 4;
  int superpixel_iters = 5;
  bool surfaces_from_sidecar = false;  // trust surfaces.csv next to the scans

  // features
  std::vector<std::string> embedders = {"ddae", "pca256"};
  int patches_per_volume = 250;
  long max_patches = 300000;
  std::vector<int> scale_arch = {512, 256, 128};
  int fuse_dim = 64;
  int pca_fixed_k = 128;
  double pca_variance = 0.95;
  nn::TrainConfig train;

  // svm
  std::vector<double> nu_grid;
  long svm_subsample_threshold = 6000;
  long svm_subsample_size = 6000;

  // cluster
  int c_min = 2;
  int c_max = 10;
  int cluster_restarts = 10;
  std::string primary_label = "late";

  // forest
  int n_trees = 64;
  int train_per_class = 20;

  // outputs
  std::map<std::string, bool> stages;  // toggles consumed by run_all
  bool export_csv = false;
  bool overlays = true;
  int eval_max_volumes = 10;

  static PipelineConfig defaults(const std::string& profile);
  static PipelineConfig from_file(const std::filesystem::path& config_path,
                                  std::optional<std::uint64_t> seed_override = {},
                                  std::optional<std::string> profile_override = {});

  /// Canonical JSON of every resolved field; embedded in run records.
  std::string to_json_string() const;
  std::string config_hash() const;

  std::filesystem::path manifest_path() const {
    return manifest.empty() ? run_dir / "data" / "manifest.csv" : manifest;
  }
};

void cmd_synth(const PipelineConfig& config);
void cmd_preprocess(const PipelineConfig& config);
void cmd_train_features(const PipelineConfig& config);
void cmd_fit_svm(const PipelineConfig& config);
void cmd_segment(const PipelineConfig& config);
void cmd_categorize(const PipelineConfig& config);
void cmd_classify(const PipelineConfig& config);
void cmd_eval(const PipelineConfig& config);

/// Dispatches one stage by name (hyphenated, as on the command line).
void run_stage(const std::string& stage, const PipelineConfig& config);

/// Runs every stage whose toggle is on (all by default), in pipeline order.
void run_all(const PipelineConfig& config);

}  // namespace octa::pipe
