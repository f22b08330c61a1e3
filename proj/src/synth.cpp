#include "octa/synth.hpp"

#include <algorithm>
#include <cmath>

#include "octa/io.hpp"

namespace octa::synth {
namespace {

struct SurfaceWave {
  double base, a1, f1, p1, a2, f2, p2, slice_drift;
  int eval(int col, int slice, int width) const {
    const double x = static_cast<double>(col) / width;
    const double phase_shift = slice_drift * slice;
    const double v = base + a1 * std::sin(2.0 * M_PI * (f1 * x + p1 + phase_shift)) +
                     a2 * std::sin(2.0 * M_PI * (f2 * x + p2 + 0.5 * phase_shift));
    return static_cast<int>(std::lround(v));
  }
};

SurfaceWave draw_wave(Rng& rng, double base, double amplitude) {
  SurfaceWave w;
  w.base = base;
  w.a1 = rng.uniform(0.5, 1.0) * amplitude;
  w.f1 = rng.uniform(0.5, 1.2);
  w.p1 = rng.uniform();
  w.a2 = rng.uniform(0.2, 0.5) * amplitude;
  w.f2 = rng.uniform(1.5, 3.0);
  w.p2 = rng.uniform();
  w.slice_drift = rng.uniform(0.02, 0.08);
  return w;
}

// Footprint with an exact pixel count: rasterize a generously scaled ellipse
// and keep the `size` pixels closest to the center (normalized metric).
std::vector<std::pair<int, int>> ellipse_footprint(int size, double aspect,
                                                   bool top_half_only) {
  const double target_area = top_half_only ? 2.0 * size : size;
  const double a = std::sqrt(target_area * aspect / M_PI) * 1.25;
  const double b = a / aspect;
  struct Px {
    double d;
    int dr, dc;
  };
  std::vector<Px> candidates;
  const int ra = static_cast<int>(std::ceil(a));
  const int rb = static_cast<int>(std::ceil(b));
  for (int dr = -rb; dr <= rb; ++dr) {
    if (top_half_only && dr > 0) continue;
    for (int dc = -ra; dc <= ra; ++dc) {
      const double d = (dc / a) * (dc / a) + (dr / b) * (dr / b);
      if (d <= 1.0) candidates.push_back({d, dr, dc});
    }
  }
  std::sort(candidates.begin(), candidates.end(), [](const Px& x, const Px& y) {
    if (x.d != y.d) return x.d < y.d;
    if (x.dr != y.dr) return x.dr < y.dr;
    return x.dc < y.dc;
  });
  if (static_cast<int>(candidates.size()) < size)
    throw ValueError("footprint rasterization fell short of the requested size");
  std::vector<std::pair<int, int>> out;
  out.reserve(size);
  for (int i = 0; i < size; ++i)
    out.emplace_back(candidates[i].dr, candidates[i].dc);
  return out;
}

struct Lesion {
  AnomalyKind kind;
  std::vector<std::pair<int, int>> footprint;  // (dr, dc) offsets
  int row = 0, col = 0;                        // anchor
  double intensity = 0.5;
};

}  // namespace

std::vector<AnomalyRecipe> recipes_for_label(const std::string& label) {
  if (label == "healthy") return {};
  if (label == "early")
    return {{AnomalyKind::DrusenBump, 70, 160, 4, 8}};
  if (label == "late")
    return {{AnomalyKind::DarkFluid, 450, 700, 1, 2},
            {AnomalyKind::BrightBlob, 40, 120, 2, 5},
            {AnomalyKind::DrusenBump, 70, 160, 1, 2}};
  throw ValueError("no anomaly recipe defined for label '" + label + "'");
}

Phantom generate_volume(const PhantomConfig& config) {
  if (config.width < 32 || config.height < 32 || config.n_bscans < 1)
    throw ValueError("phantom dimensions too small");
  if (config.band_levels.size() < 2)
    throw ValueError("phantom needs at least two intensity bands");
  if (config.label == "healthy" && !config.recipes.empty())
    throw ValueError("healthy phantoms must not carry anomaly recipes");

  // Independent streams per concern: the healthy backdrop must not depend on
  // how many anomaly draws happen.
  Rng rng_surf(Rng::derive(config.seed, "surfaces"));
  Rng rng_bands(Rng::derive(config.seed, "bands"));
  Rng rng_speckle(Rng::derive(config.seed, "speckle"));
  Rng rng_anom(Rng::derive(config.seed, "anomalies"));

  const int w = config.width, h = config.height;
  const SurfaceWave ilm_wave = draw_wave(rng_surf, 0.26 * h, config.surface_amplitude);
  const SurfaceWave bm_wave = draw_wave(rng_surf, 0.70 * h, 0.6 * config.surface_amplitude);

  std::vector<double> bands = config.band_levels;
  for (auto& b : bands)
    b = std::clamp(b + rng_bands.uniform(-config.band_jitter, config.band_jitter), 0.05, 0.98);
  const std::vector<double> band_edges = [&] {
    std::vector<double> e(bands.size() + 1);
    for (std::size_t i = 0; i <= bands.size(); ++i)
      e[i] = static_cast<double>(i) / static_cast<double>(bands.size());
    // Make the outer bands thinner than the middle ones, like NFL/RPE.
    if (e.size() >= 5) {
      e[1] = 0.14;
      e[e.size() - 2] = 0.80;
    }
    return e;
  }();

  Phantom out;
  out.label = config.label;
  out.volume.id = config.label;
  out.volume.spacing_um = config.spacing_um;

  const double speckle_shape =
      config.speckle_sigma > 0 ? 1.0 / (config.speckle_sigma * config.speckle_sigma) : 0.0;

  for (int s = 0; s < config.n_bscans; ++s) {
    LayerSurfaces surf;
    surf.ilm.resize(w);
    surf.bm.resize(w);
    for (int c = 0; c < w; ++c) {
      surf.ilm[c] = std::clamp(ilm_wave.eval(c, s, w), 4, h - 24);
      surf.bm[c] = std::clamp(bm_wave.eval(c, s, w), surf.ilm[c] + 20, h - 6);
    }
    surf.validate(h);

    Image<float> base(w, h, 0.05f);
    for (int c = 0; c < w; ++c) {
      const int ilm = surf.ilm[c], bm = surf.bm[c];
      const double thickness = bm - ilm;
      for (int r = ilm; r <= bm; ++r) {
        const double frac = (r - ilm) / std::max(1.0, thickness);
        std::size_t band = 0;
        while (band + 1 < bands.size() && frac >= band_edges[band + 1]) ++band;
        base.at(r, c) = static_cast<float>(bands[band]);
      }
      for (int r = bm + 1; r < h; ++r)
        base.at(r, c) = static_cast<float>(0.18 * std::exp(-(r - bm) / 12.0) + 0.04);
    }

    // Plant lesions before speckle so the texture modulates them too.
    Image<std::uint16_t> mask(w, h, 0);
    for (const auto& recipe : config.recipes) {
      const int count = recipe.min_count +
                        static_cast<int>(rng_anom.uniform_int(
                            recipe.max_count - recipe.min_count + 1));
      for (int k = 0; k < count; ++k) {
        const int size = recipe.min_size +
                         static_cast<int>(rng_anom.uniform_int(
                             recipe.max_size - recipe.min_size + 1));
        // Flat-ish lesions fit the retinal band; fluid pockets are widest.
        double aspect;
        switch (recipe.kind) {
          case AnomalyKind::DarkFluid:
            aspect = rng_anom.uniform(1.6, 2.4);
            break;
          case AnomalyKind::DrusenBump:
            aspect = rng_anom.uniform(1.8, 2.6);
            break;
          default:
            aspect = rng_anom.uniform(1.2, 1.8);
        }
        Lesion lesion;
        lesion.kind = recipe.kind;
        lesion.footprint =
            ellipse_footprint(size, aspect, recipe.kind == AnomalyKind::DrusenBump);
        switch (recipe.kind) {
          case AnomalyKind::BrightBlob:
            lesion.intensity = rng_anom.uniform(0.93, 0.99);
            break;
          case AnomalyKind::DarkFluid:
            lesion.intensity = rng_anom.uniform(0.04, 0.10);
            break;
          case AnomalyKind::DrusenBump:
            lesion.intensity = rng_anom.uniform(0.45, 0.55);
            break;
        }
        int dr_min = 0, dr_max = 0, dc_min = 0, dc_max = 0;
        for (const auto& [dr, dc] : lesion.footprint) {
          dr_min = std::min(dr_min, dr);
          dr_max = std::max(dr_max, dr);
          dc_min = std::min(dc_min, dc);
          dc_max = std::max(dc_max, dc);
        }
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
          const int col = static_cast<int>(rng_anom.uniform_int(w));
          const int ilm = surf.ilm[col], bm = surf.bm[col];
          int row;
          if (recipe.kind == AnomalyKind::DrusenBump) {
            row = bm - 1;  // dome sits on the bottom surface
          } else {
            const int lo = ilm + 6 - dr_min, hi = bm - 6 - dr_max;
            if (lo > hi) continue;
            row = lo + static_cast<int>(rng_anom.uniform_int(hi - lo + 1));
          }
          bool fits = true;
          for (const auto& [dr, dc] : lesion.footprint) {
            const int r = row + dr, c = col + dc;
            if (c < 0 || c >= w || r < surf.ilm[std::clamp(c, 0, w - 1)] + 2 ||
                r > surf.bm[std::clamp(c, 0, w - 1)] - 1) {
              fits = false;
              break;
            }
          }
          if (!fits) continue;
          lesion.row = row;
          lesion.col = col;
          placed = true;
        }
        if (!placed)
          throw ValueError("anomaly of size " + std::to_string(size) +
                           " does not fit the phantom retina");
        for (const auto& [dr, dc] : lesion.footprint) {
          base.at(lesion.row + dr, lesion.col + dc) =
              static_cast<float>(lesion.intensity);
          mask.at(lesion.row + dr, lesion.col + dc) = 1;
        }
      }
    }

    BScan bscan;
    bscan.maxval = 255;
    bscan.pixels = Image<std::uint16_t>(w, h);
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        double v = base.at(r, c);
        if (speckle_shape > 0) v *= rng_speckle.gamma(speckle_shape) / speckle_shape;
        v = std::clamp(v, 0.0, 1.0);
        bscan.pixels.at(r, c) = static_cast<std::uint16_t>(std::lround(v * 255.0));
      }
    }

    out.volume.bscans.push_back(std::move(bscan));
    out.surfaces.push_back(std::move(surf));
    out.mask.slices.push_back(std::move(mask));
  }

  out.mask.legend = {{0, "normal"}, {1, "anomaly"}};
  out.volume.validate();
  return out;
}

DatasetManifest generate_dataset(const std::vector<ClassPlanEntry>& plan,
                                 const PhantomConfig& base, std::uint64_t seed,
                                 const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  for (const auto& entry : plan)
    if (entry.count < 1) throw ValueError("plan counts must be at least 1");

  fs::create_directories(out_dir);
  DatasetManifest manifest;
  for (const auto& entry : plan) {
    for (int i = 0; i < entry.count; ++i) {
      char idx[16];
      std::snprintf(idx, sizeof(idx), "%03d", i);
      const std::string id = entry.label + "_" + entry.split + "_" + idx;

      PhantomConfig cfg = base;
      cfg.label = entry.label;
      cfg.recipes = recipes_for_label(entry.label);
      cfg.seed = Rng::derive(seed, id);
      Phantom phantom = generate_volume(cfg);
      phantom.volume.id = id;

      const fs::path vol_dir = out_dir / id;
      io::save_volume(phantom.volume, vol_dir);
      io::save_surfaces_csv(phantom.surfaces, vol_dir / "gt_surfaces.csv");

      ManifestEntry me;
      me.volume_path = vol_dir.string();
      me.label = entry.label;
      me.split = entry.split;
      if (entry.label != "healthy") {
        const fs::path mask_dir = out_dir / (id + "_mask");
        io::save_mask(phantom.mask, mask_dir);
        me.mask_path = mask_dir.string();
      }
      manifest.entries.push_back(std::move(me));
    }
  }
  io::save_manifest(manifest, out_dir / "manifest.csv");
  return manifest;
}

}  // namespace octa::synth
