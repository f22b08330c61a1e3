#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "octa/rng.hpp"
#include "octa/types.hpp"

namespace octa::synth {

enum class AnomalyKind { BrightBlob, DarkFluid, DrusenBump };

/// One family of lesions: how many to plant and how large, where size is the
/// exact footprint area in pixels of each lesion's mask.
struct AnomalyRecipe {
  AnomalyKind kind = AnomalyKind::BrightBlob;
  int min_size = 40, max_size = 120;  // pixels per lesion
  int min_count = 1, max_count = 3;   // lesions per B-scan
};

struct PhantomConfig {
  int width = 128, height = 128, n_bscans = 4;
  std::array<double, 3> spacing_um = {11.0, 4.0, 120.0};
  double surface_amplitude = 5.0;  // px, low-frequency undulation of both surfaces
  std::vector<double> band_levels = {0.78, 0.42, 0.62, 0.88};  // top to bottom
  double band_jitter = 0.04;       // per-volume intensity wobble
  double speckle_sigma = 0.16;     // multiplicative gamma speckle, mean 1
  std::vector<AnomalyRecipe> recipes;
  std::string label = "healthy";
  std::uint64_t seed = 1;
};

struct Phantom {
  OctVolume volume;
  std::vector<LayerSurfaces> surfaces;  // ground truth, one per slice
  AnnotationMask mask;                  // 0 normal, 1 anomaly
  std::string label;
};

/// Renders a layered retina-like volume with known surfaces and exact lesion
/// masks. Deterministic under config.seed; the surface/texture streams are
/// independent of the anomaly stream, so clearing the recipes yields the
/// identical healthy backdrop.
Phantom generate_volume(const PhantomConfig& config);

/// Recipe presets keyed by class label: healthy plants nothing, early plants
/// drusen-like bumps, late adds fluid pockets and hyperreflective blobs.
std::vector<AnomalyRecipe> recipes_for_label(const std::string& label);

struct ClassPlanEntry {
  std::string label;
  std::string split;
  int count = 1;
};

/// Generates a dataset on disk: one volume directory (and mask directory for
/// anomalous classes) per entry, plus manifest.csv. Ground-truth surfaces are
/// written as gt_surfaces.csv inside each volume directory.
DatasetManifest generate_dataset(const std::vector<ClassPlanEntry>& plan,
                                 const PhantomConfig& base, std::uint64_t seed,
                                 const std::filesystem::path& out_dir);

}  // namespace octa::synth
