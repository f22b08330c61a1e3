#include <doctest.h>

#include <fstream>

#include "octa/pipeline.hpp"
#include "test_util.hpp"

using namespace octa;

namespace {

// Tiny but complete run: every stage exercised in seconds.
pipe::PipelineConfig smoke_config(const std::filesystem::path& run_dir,
                                  std::uint64_t seed) {
  pipe::PipelineConfig cfg = pipe::PipelineConfig::defaults("desk");
  cfg.run_dir = run_dir;
  cfg.seed = seed;
  cfg.phantom.width = 96;
  cfg.phantom.height = 96;
  cfg.phantom.n_bscans = 2;
  cfg.plan = {{"healthy", "train", 3},        {"healthy", "test", 2},
              {"late", "validation", 1},      {"late", "categorization", 2},
              {"late", "test", 2},            {"early", "categorization", 2},
              {"early", "test", 2}};
  cfg.embedders = {"ddae", "pca256"};
  cfg.scale_arch = {64, 32};
  cfg.fuse_dim = 16;
  cfg.pca_fixed_k = 16;
  cfg.patches_per_volume = 60;
  cfg.train.lr_schedule = {{2, 1e-4}, {1, 1e-5}};
  cfg.train.minibatch = 25;
  cfg.train.seed = seed;
  cfg.nu_grid = {0.1, 0.3};
  cfg.c_min = 2;
  cfg.c_max = 3;
  cfg.cluster_restarts = 4;
  cfg.n_trees = 8;
  cfg.train_per_class = 3;
  cfg.eval_max_volumes = 2;
  return cfg;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("config file parsing applies overrides on profile defaults") {
  TempDir tmp;
  const auto config_path = tmp.path / "config.json";
  {
    std::ofstream out(config_path);
    out << R"({
      "run_dir": "runs/demo",
      "seed": 7,
      "profile": "desk",
      "synth": {"width": 100, "plan": [{"label": "healthy", "split": "train", "count": 2}]},
      "features": {"embedders": ["pca256"], "fuse_dim": 32,
                   "lr_schedule": [{"epochs": 4, "rate": 0.001}]},
      "svm": {"nu_grid": [0.1, 0.2]},
      "cluster": {"c_max": 6},
      "stages": {"classify": false}
    })";
  }
  const auto cfg = pipe::PipelineConfig::from_file(config_path);
  CHECK(cfg.seed == 7);
  CHECK(cfg.run_dir == (tmp.path / "runs/demo"));
  CHECK(cfg.phantom.width == 100);
  CHECK(cfg.phantom.height == 128);  // profile default survives
  CHECK(cfg.plan.size() == 1);
  CHECK(cfg.embedders == std::vector<std::string>{"pca256"});
  CHECK(cfg.fuse_dim == 32);
  CHECK(cfg.train.lr_schedule.size() == 1);
  CHECK(cfg.train.lr_schedule[0].epochs == 4);
  CHECK(cfg.nu_grid == std::vector<double>{0.1, 0.2});
  CHECK(cfg.c_max == 6);
  CHECK(cfg.stages.at("classify") == false);
  CHECK(cfg.stages.at("segment") == true);

  // Overrides beat the file.
  const auto forced = pipe::PipelineConfig::from_file(config_path, 99, "paper");
  CHECK(forced.seed == 99);
  CHECK(forced.scale_arch == std::vector<int>{2048, 1024, 512});

  const auto hash_a = cfg.config_hash();
  CHECK(hash_a == pipe::PipelineConfig::from_file(config_path).config_hash());
  CHECK(hash_a != forced.config_hash());
}

TEST_CASE("missing prerequisites raise actionable errors") {
  TempDir tmp;
  const auto cfg = smoke_config(tmp.path / "run", 5);
  CHECK_THROWS_AS(pipe::cmd_fit_svm(cfg), PrerequisiteError);
  CHECK_THROWS_AS(pipe::cmd_preprocess(cfg), PrerequisiteError);  // no manifest yet
}

TEST_CASE("lockfile blocks concurrent stage execution") {
  TempDir tmp;
  const auto cfg = smoke_config(tmp.path / "run", 6);
  std::filesystem::create_directories(cfg.run_dir);
  {
    std::ofstream lock(cfg.run_dir / ".octa_lock");
    lock << "held\n";
  }
  CHECK_THROWS_AS(pipe::cmd_synth(cfg), Error);
  std::filesystem::remove(cfg.run_dir / ".octa_lock");
  CHECK_NOTHROW(pipe::cmd_synth(cfg));
  // Lock released afterwards.
  CHECK(!std::filesystem::exists(cfg.run_dir / ".octa_lock"));
}

TEST_CASE("six-volume smoke pipeline end to end") {
  TempDir tmp;
  const auto cfg = smoke_config(tmp.path / "run", 21);
  pipe::run_all(cfg);

  // Every stage leaves its record and key artifacts.
  for (const auto& stage : pipe::kStageOrder)
    CHECK(std::filesystem::exists(cfg.run_dir / "run-records" / (stage + ".json")));
  CHECK(std::filesystem::exists(cfg.run_dir / "models" / "ddae.octm"));
  CHECK(std::filesystem::exists(cfg.run_dir / "models" / "pca256.octm"));
  CHECK(std::filesystem::exists(cfg.run_dir / "models" / "ocsvm_ddae.octm"));
  CHECK(std::filesystem::exists(cfg.run_dir / "svm" / "sweep_ddae.csv"));
  CHECK(std::filesystem::exists(cfg.run_dir / "svm" / "sweep_pca256.csv"));
  CHECK(std::filesystem::exists(cfg.run_dir / "features" / "loss_ddae_small.csv"));
  CHECK(std::filesystem::exists(cfg.run_dir / "models" / "cluster_late.octm"));
  CHECK(std::filesystem::exists(cfg.run_dir / "categorize" / "db_curve_late.csv"));
  CHECK(std::filesystem::exists(cfg.run_dir / "categorize" /
                                "correspondence_late_vs_early.csv"));
  CHECK(std::filesystem::exists(cfg.run_dir / "categorize" / "palette.txt"));
  CHECK(std::filesystem::exists(cfg.run_dir / "classify" / "classify_report.json"));
  CHECK(std::filesystem::exists(cfg.run_dir / "classify" / "confusion_cluster.csv"));
  CHECK(std::filesystem::exists(cfg.run_dir / "classify" / "importance_mda.csv"));
  CHECK(std::filesystem::exists(cfg.run_dir / "classify" / "predictions.json"));
  CHECK(std::filesystem::exists(cfg.run_dir / "eval" / "report.json"));
  CHECK(std::filesystem::exists(cfg.run_dir / "eval" / "metrics_table.csv"));
  CHECK(std::filesystem::exists(cfg.run_dir / "eval" / "pr_curve_ddae.csv"));

  // Per-B-scan overlays for a segmented volume.
  CHECK(std::filesystem::exists(cfg.run_dir / "segment" / "ddae" /
                                "late_test_000" / "overlay_000.ppm"));
  CHECK(std::filesystem::exists(cfg.run_dir / "segment" / "ddae" /
                                "late_test_000" / "mask_001.pgm"));
  CHECK(std::filesystem::exists(cfg.run_dir / "categorize" / "maps" /
                                "late_categorization_000" / "cluster_000.pgm"));

  // Rerunning a single stage is idempotent byte for byte.
  const std::string report_before = slurp(cfg.run_dir / "eval" / "report.json");
  pipe::cmd_eval(cfg);
  CHECK(slurp(cfg.run_dir / "eval" / "report.json") == report_before);
}

TEST_CASE("preprocess accepts surfaces sidecars instead of computing") {
  TempDir tmp;
  pipe::PipelineConfig cfg = smoke_config(tmp.path / "run", 8);
  cfg.plan = {{"healthy", "train", 2}};
  pipe::cmd_synth(cfg);

  // Promote the generated ground-truth surfaces to the sidecar the stage
  // looks for.
  for (const auto& entry : std::filesystem::directory_iterator(cfg.run_dir / "data")) {
    if (!entry.is_directory()) continue;
    std::filesystem::copy_file(entry.path() / "gt_surfaces.csv",
                               entry.path() / "surfaces.csv");
  }
  cfg.surfaces_from_sidecar = true;
  CHECK_NOTHROW(pipe::cmd_preprocess(cfg));
  CHECK(std::filesystem::exists(cfg.run_dir / "preprocessed" /
                                "healthy_train_000" / "surfaces.csv"));
}
