#include <doctest.h>

#include "octa/io.hpp"
#include "octa/synth.hpp"
#include "test_util.hpp"

using namespace octa;

TEST_CASE("healthy phantom has an all-zero mask and valid surfaces") {
  synth::PhantomConfig cfg;
  cfg.seed = 5;
  const synth::Phantom phantom = synth::generate_volume(cfg);
  for (const auto& slice : phantom.mask.slices)
    for (const auto v : slice.data()) CHECK(v == 0);
  for (const auto& surf : phantom.surfaces)
    CHECK_NOTHROW(surf.validate(cfg.height));
}

TEST_CASE("same seed reproduces the volume bit for bit") {
  synth::PhantomConfig cfg;
  cfg.label = "late";
  cfg.recipes = synth::recipes_for_label("late");
  cfg.seed = 77;
  const synth::Phantom a = synth::generate_volume(cfg);
  const synth::Phantom b = synth::generate_volume(cfg);
  REQUIRE(a.volume.n_slices() == b.volume.n_slices());
  for (int s = 0; s < a.volume.n_slices(); ++s) {
    CHECK(a.volume.bscans[s].pixels == b.volume.bscans[s].pixels);
    CHECK(a.mask.slices[s] == b.mask.slices[s]);
  }
}

TEST_CASE("single fluid pocket footprint matches the configured size range") {
  synth::PhantomConfig cfg;
  cfg.label = "late";
  cfg.n_bscans = 1;
  cfg.recipes = {{synth::AnomalyKind::DarkFluid, 450, 700, 1, 1}};
  cfg.seed = 31;
  const synth::Phantom phantom = synth::generate_volume(cfg);
  long count = 0;
  for (const auto v : phantom.mask.slices[0].data()) count += v != 0;
  CHECK(count >= 450);
  CHECK(count <= 700);
}

TEST_CASE("anomalies modify only masked pixels") {
  // The healthy twin shares the seed, so surfaces, bands and speckle agree;
  // any pixel difference must sit inside the mask.
  synth::PhantomConfig diseased;
  diseased.label = "late";
  diseased.recipes = synth::recipes_for_label("late");
  diseased.seed = 99;
  synth::PhantomConfig healthy = diseased;
  healthy.label = "healthy";
  healthy.recipes.clear();

  const synth::Phantom a = synth::generate_volume(diseased);
  const synth::Phantom b = synth::generate_volume(healthy);
  long differing = 0, mask_pixels = 0;
  for (int s = 0; s < a.volume.n_slices(); ++s) {
    const auto& pa = a.volume.bscans[s].pixels;
    const auto& pb = b.volume.bscans[s].pixels;
    const auto& mask = a.mask.slices[s];
    for (std::size_t i = 0; i < pa.size(); ++i) {
      mask_pixels += mask.data()[i] != 0;
      if (pa.data()[i] != pb.data()[i]) {
        ++differing;
        CHECK(mask.data()[i] != 0);  // no bleed outside the footprint
      }
    }
  }
  CHECK(mask_pixels > 0);
  // Speckle and clipping can make a few lesion pixels coincide with the
  // backdrop, but the bulk must differ.
  CHECK(differing >= static_cast<long>(0.7 * mask_pixels));
}

TEST_CASE("anomalies stay between the surfaces") {
  synth::PhantomConfig cfg;
  cfg.label = "late";
  cfg.recipes = synth::recipes_for_label("late");
  cfg.seed = 123;
  const synth::Phantom phantom = synth::generate_volume(cfg);
  for (int s = 0; s < phantom.volume.n_slices(); ++s) {
    const auto& mask = phantom.mask.slices[s];
    const auto& surf = phantom.surfaces[s];
    for (int r = 0; r < mask.height(); ++r)
      for (int c = 0; c < mask.width(); ++c)
        if (mask.at(r, c)) {
          CHECK(r >= surf.ilm[c]);
          CHECK(r <= surf.bm[c]);
        }
  }
}

TEST_CASE("oversized lesion that cannot fit raises a generation error") {
  synth::PhantomConfig cfg;
  cfg.label = "late";
  cfg.height = 64;  // thin retina
  cfg.recipes = {{synth::AnomalyKind::DarkFluid, 4000, 4000, 1, 1}};
  CHECK_THROWS_AS(synth::generate_volume(cfg), ValueError);
}

TEST_CASE("generate_dataset writes a balanced manifest") {
  TempDir tmp;
  synth::PhantomConfig base;
  base.n_bscans = 2;
  base.width = 96;
  base.height = 96;
  const std::vector<synth::ClassPlanEntry> plan = {
      {"healthy", "train", 2}, {"early", "test", 2}, {"late", "test", 2}};
  const DatasetManifest manifest = synth::generate_dataset(plan, base, 7, tmp.path);
  REQUIRE(manifest.entries.size() == 6);

  std::map<std::string, int> per_label;
  for (const auto& e : manifest.entries) {
    ++per_label[e.label];
    CHECK(std::filesystem::exists(std::filesystem::path(e.volume_path) / "meta.txt"));
    CHECK(std::filesystem::exists(std::filesystem::path(e.volume_path) /
                                  "gt_surfaces.csv"));
    if (e.label == "healthy")
      CHECK(e.mask_path.empty());
    else
      CHECK(std::filesystem::exists(std::filesystem::path(e.mask_path) / "legend.txt"));
  }
  CHECK(per_label["healthy"] == 2);
  CHECK(per_label["early"] == 2);
  CHECK(per_label["late"] == 2);

  // The reloaded manifest resolves to the same paths.
  const DatasetManifest loaded = io::load_manifest(tmp.path / "manifest.csv");
  CHECK(loaded.entries.size() == manifest.entries.size());

  // Pooled anomaly fraction orders late above early.
  const auto pooled_fraction = [&](const std::string& label) {
    long anomalous = 0, total = 0;
    for (const auto& e : loaded.entries) {
      if (e.label != label) continue;
      const AnnotationMask mask = io::load_mask(e.mask_path);
      for (const auto& slice : mask.slices)
        for (const auto v : slice.data()) {
          ++total;
          anomalous += v != 0;
        }
    }
    return static_cast<double>(anomalous) / static_cast<double>(total);
  };
  CHECK(pooled_fraction("late") > pooled_fraction("early"));
}
