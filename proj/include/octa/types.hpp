#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "octa/errors.hpp"
#include "octa/image.hpp"

namespace octa {

/// One 2-D slice of an OCT volume. Pixels are stored as they appear on disk
/// (8- or 16-bit unsigned, tracked by maxval) and converted to real values
/// only inside the processing stages.
struct BScan {
  Image<std::uint16_t> pixels;
  int maxval = 255;

  int width() const { return pixels.width(); }
  int height() const { return pixels.height(); }
};

struct OctVolume {
  std::string id;
  std::array<double, 3> spacing_um = {11.0, 4.0, 120.0};  // x (lateral), y (axial), z (between slices)
  std::vector<BScan> bscans;

  int width() const { return bscans.empty() ? 0 : bscans.front().width(); }
  int height() const { return bscans.empty() ? 0 : bscans.front().height(); }
  int n_slices() const { return static_cast<int>(bscans.size()); }

  double voxel_volume_um3() const {
    return spacing_um[0] * spacing_um[1] * spacing_um[2];
  }

  void validate() const {
    if (bscans.empty()) throw ValueError("volume '" + id + "' has no B-scans");
    for (const auto& s : spacing_um)
      if (!(s > 0.0)) throw ValueError("volume '" + id + "' has non-positive spacing");
    for (const auto& b : bscans)
      if (!b.pixels.same_shape(bscans.front().pixels))
        throw ShapeError("volume '" + id + "' mixes B-scan dimensions");
  }
};

/// Integer label grid per slice; label 0 is reserved for normal/background.
struct AnnotationMask {
  std::vector<Image<std::uint16_t>> slices;
  std::map<int, std::string> legend;  // label -> name

  int width() const { return slices.empty() ? 0 : slices.front().width(); }
  int height() const { return slices.empty() ? 0 : slices.front().height(); }
  int n_slices() const { return static_cast<int>(slices.size()); }

  void validate() const {
    if (slices.empty()) throw ValueError("mask has no slices");
    for (const auto& s : slices)
      if (!s.same_shape(slices.front()))
        throw ShapeError("mask mixes slice dimensions");
  }
};

struct ManifestEntry {
  std::string volume_path;
  std::string label;      // healthy, early, late, ...
  std::string mask_path;  // empty when no annotation exists
  std::string split;      // train | validation | test | categorization
};

inline const std::array<std::string, 4> kSplitNames = {
    "train", "validation", "test", "categorization"};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  void validate() const {
    for (const auto& e : entries) {
      bool known = false;
      for (const auto& s : kSplitNames) known = known || e.split == s;
      if (!known) throw ValueError("unknown split tag '" + e.split + "'");
    }
  }
};

/// Per-column row indices of the retinal boundaries: ilm on top, bm below.
struct LayerSurfaces {
  std::vector<int> ilm;
  std::vector<int> bm;
  int smoothness_bound = 2;  // max |surface[c+1] - surface[c]|

  int width() const { return static_cast<int>(ilm.size()); }

  void validate(int height) const {
    if (ilm.size() != bm.size() || ilm.empty())
      throw ShapeError("surface vectors disagree in length");
    for (std::size_t c = 0; c < ilm.size(); ++c) {
      if (!(0 <= ilm[c] && ilm[c] < bm[c] && bm[c] < height))
        throw ValueError("surface ordering violated at column " + std::to_string(c));
      if (c > 0) {
        if (std::abs(ilm[c] - ilm[c - 1]) > smoothness_bound ||
            std::abs(bm[c] - bm[c - 1]) > smoothness_bound)
          throw ValueError("surface smoothness violated at column " + std::to_string(c));
      }
    }
  }
};

/// B-scan after flatten + intensity normalization: real pixels in [0, 1].
struct NormalizedBScan {
  Image<float> pixels;
  std::string volume_id;
  int slice = 0;

  int width() const { return pixels.width(); }
  int height() const { return pixels.height(); }
};

/// Over-segmentation of the retinal region. labels holds the superpixel id
/// per pixel (-1 outside the retina); ids are contiguous from 0.
struct SuperpixelMap {
  Image<std::int32_t> labels;
  std::vector<std::pair<float, float>> centers;  // (row, col) centroids
  int merged = 0;  // superpixels absorbed by neighbors (thin retina)

  int size() const { return static_cast<int>(centers.size()); }
};

}  // namespace octa
