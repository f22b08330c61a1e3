#pragma once

#include <filesystem>

#include "octa/types.hpp"

namespace octa::io {

/// A volume on disk is a directory of P5 PGM files, one per B-scan, named
/// `bscan_<index>.pgm` with a zero-padded slice index, plus a `meta.txt`
/// sidecar carrying the id and voxel spacing. Slice order is the numeric
/// index order; duplicate or unparsable indices are format errors.
OctVolume load_volume(const std::filesystem::path& dir);
void save_volume(const OctVolume& volume, const std::filesystem::path& dir);

/// A mask is a directory of `mask_<index>.pgm` label images (pixel value =
/// label, maxval 255) plus a `legend.txt` sidecar mapping labels to names.
AnnotationMask load_mask(const std::filesystem::path& dir);
void save_mask(const AnnotationMask& mask, const std::filesystem::path& dir);

/// Manifest CSV with the header `volume,label,mask,split`. Paths are stored
/// relative to the manifest file and resolved on load.
DatasetManifest load_manifest(const std::filesystem::path& csv);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& csv);

/// Surfaces sidecar CSV with the header `slice,col,ilm_row,bm_row`.
std::vector<LayerSurfaces> load_surfaces_csv(const std::filesystem::path& csv);
void save_surfaces_csv(const std::vector<LayerSurfaces>& surfaces,
                       const std::filesystem::path& csv);

}  // namespace octa::io
