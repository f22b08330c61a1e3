#pragma once

#include "octa/types.hpp"

namespace octa::prep {

/// Locates the top (ILM) and bottom (BM) retinal boundaries by dynamic
/// programming over a vertical-gradient cost image: the ILM path follows the
/// strongest dark-to-bright transition from the top, the BM path the
/// strongest bright-to-dark transition below it. Column-to-column steps are
/// bounded by LayerSurfaces::smoothness_bound.
/// Throws SegmentationError when the image carries no usable gradient.
LayerSurfaces find_surfaces(const BScan& bscan);

struct FlattenResult {
  BScan bscan;
  LayerSurfaces surfaces;  // surfaces in the flattened frame
  int target_row = 0;
};

/// Shifts every column down so the BM lands on a common row (the maximum BM
/// row, or `target_row` when non-negative, e.g. to align a whole volume).
/// Vacated pixels are zero, pixels pushed past the bottom are dropped.
FlattenResult flatten(const BScan& bscan, const LayerSurfaces& surfaces,
                      int target_row = -1);

/// Clips intensities to the [p1, p99] percentile window and maps the window
/// affinely to [0, 1]. Invariant to any affine intensity change that leaves
/// the clipped window's relative position intact.
/// Throws ValueError on a constant image.
NormalizedBScan normalize(const BScan& bscan);

enum class SuperpixelMode { Grid, Slic };

/// Over-segments the retinal region (rows between ILM and BM inclusive) into
/// superpixels of nominal `step`x`step` size. Grid mode partitions exactly;
/// Slic mode refines the grid with `iters` rounds of
///   distance = |intensity difference| + 0.5 * (spatial distance / step).
/// Superpixels smaller than `step` pixels are merged into their closest
/// neighbor and counted in SuperpixelMap::merged.
SuperpixelMap oversegment(const NormalizedBScan& bscan, const LayerSurfaces& surfaces,
                          SuperpixelMode mode = SuperpixelMode::Slic, int step = 4,
                          int iters = 5);

}  // namespace octa::prep
