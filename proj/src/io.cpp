#include "octa/io.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>

#include "octa/csv.hpp"
#include "octa/pgm.hpp"
#include "octa/sidecar.hpp"

namespace octa::io {
namespace fs = std::filesystem;

namespace {

// Collects "<prefix>NNN.pgm" files and orders them by the parsed index.
std::vector<fs::path> indexed_pgms(const fs::path& dir, const std::string& prefix) {
  if (!fs::is_directory(dir))
    throw FormatError("'" + dir.string() + "' is not a directory");
  std::map<long, fs::path> by_index;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (entry.path().extension() != ".pgm") continue;
    if (name.rfind(prefix, 0) != 0) continue;
    const std::string digits = name.substr(prefix.size(), name.size() - prefix.size() - 4);
    if (digits.empty() ||
        digits.find_first_not_of("0123456789") != std::string::npos)
      throw FormatError("cannot parse slice index from '" + name + "'");
    const long idx = std::stol(digits);
    if (by_index.count(idx))
      throw FormatError("duplicate slice index " + std::to_string(idx) + " in '" +
                        dir.string() + "'");
    by_index[idx] = entry.path();
  }
  std::vector<fs::path> out;
  out.reserve(by_index.size());
  for (const auto& [idx, p] : by_index) out.push_back(p);
  return out;
}

std::string zero_padded(int n, int width = 3) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%0*d", width, n);
  return buf;
}

double sidecar_double(const std::map<std::string, std::string>& kv,
                      const std::string& key, const fs::path& where) {
  const auto it = kv.find(key);
  if (it == kv.end())
    throw FormatError("sidecar '" + where.string() + "' is missing '" + key + "'");
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    throw FormatError("sidecar '" + where.string() + "' has a non-numeric '" + key + "'");
  }
}

}  // namespace

OctVolume load_volume(const fs::path& dir) {
  const fs::path meta = dir / "meta.txt";
  if (!fs::exists(meta))
    throw FormatError("volume '" + dir.string() + "' lacks the meta.txt sidecar");
  const auto kv = read_sidecar(meta);

  OctVolume vol;
  const auto id_it = kv.find("id");
  vol.id = id_it != kv.end() ? id_it->second : dir.filename().string();
  vol.spacing_um = {sidecar_double(kv, "spacing_x_um", meta),
                    sidecar_double(kv, "spacing_y_um", meta),
                    sidecar_double(kv, "spacing_z_um", meta)};

  const auto files = indexed_pgms(dir, "bscan_");
  if (files.empty())
    throw FormatError("volume '" + dir.string() + "' contains no bscan_*.pgm files");
  for (const auto& f : files) {
    PgmImage img = read_pgm(f);
    vol.bscans.push_back(BScan{std::move(img.pixels), img.maxval});
  }
  for (const auto& b : vol.bscans)
    if (!b.pixels.same_shape(vol.bscans.front().pixels))
      throw ShapeError("volume '" + dir.string() + "' mixes B-scan dimensions");
  vol.validate();
  return vol;
}

void save_volume(const OctVolume& volume, const fs::path& dir) {
  volume.validate();
  fs::create_directories(dir);
  write_sidecar(dir / "meta.txt",
                {{"id", volume.id},
                 {"spacing_x_um", fmt_g(volume.spacing_um[0])},
                 {"spacing_y_um", fmt_g(volume.spacing_um[1])},
                 {"spacing_z_um", fmt_g(volume.spacing_um[2])}});
  for (int i = 0; i < volume.n_slices(); ++i) {
    const auto& b = volume.bscans[i];
    write_pgm(dir / ("bscan_" + zero_padded(i) + ".pgm"), b.pixels, b.maxval);
  }
}

AnnotationMask load_mask(const fs::path& dir) {
  AnnotationMask mask;
  const fs::path legend = dir / "legend.txt";
  if (fs::exists(legend)) {
    for (const auto& [k, v] : read_sidecar(legend)) {
      try {
        mask.legend[std::stoi(k)] = v;
      } catch (const std::exception&) {
        throw FormatError("legend '" + legend.string() + "' has non-integer label '" + k + "'");
      }
    }
  }
  const auto files = indexed_pgms(dir, "mask_");
  if (files.empty())
    throw FormatError("mask '" + dir.string() + "' contains no mask_*.pgm files");
  for (const auto& f : files) mask.slices.push_back(read_pgm(f).pixels);
  mask.validate();
  return mask;
}

void save_mask(const AnnotationMask& mask, const fs::path& dir) {
  mask.validate();
  for (const auto& [label, name] : mask.legend)
    if (label < 0 || label > 255)
      throw ValueError("label " + std::to_string(label) + " does not fit in 8 bits");
  for (const auto& slice : mask.slices)
    for (const auto v : slice.data())
      if (v > 255)
        throw ValueError("mask pixel " + std::to_string(v) + " does not fit in 8 bits");
  std::set<std::string> names;
  for (const auto& [label, name] : mask.legend)
    if (!names.insert(name).second)
      throw ValueError("legend duplicates the name '" + name + "'");

  fs::create_directories(dir);
  std::vector<std::pair<std::string, std::string>> legend_pairs;
  for (const auto& [label, name] : mask.legend)
    legend_pairs.emplace_back(std::to_string(label), name);
  write_sidecar(dir / "legend.txt", legend_pairs);
  for (int i = 0; i < mask.n_slices(); ++i)
    write_pgm(dir / ("mask_" + zero_padded(i) + ".pgm"), mask.slices[i], 255);
}

DatasetManifest load_manifest(const fs::path& csv) {
  const auto rows = read_csv(csv);
  if (rows.empty() || rows.front().size() < 4 || rows.front()[0] != "volume")
    throw FormatError("manifest '" + csv.string() + "' lacks the volume,label,mask,split header");
  const fs::path base = csv.parent_path();
  DatasetManifest manifest;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() < 4)
      throw FormatError("manifest row " + std::to_string(i) + " is short");
    ManifestEntry e;
    e.volume_path = (base / r[0]).lexically_normal().string();
    e.label = r[1];
    e.mask_path = r[2].empty() ? "" : (base / r[2]).lexically_normal().string();
    e.split = r[3];
    manifest.entries.push_back(std::move(e));
  }
  manifest.validate();
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& csv) {
  manifest.validate();
  const fs::path base = csv.parent_path();
  CsvWriter w(csv);
  w.row({"volume", "label", "mask", "split"});
  for (const auto& e : manifest.entries) {
    const std::string vol = fs::path(e.volume_path).lexically_proximate(base).string();
    const std::string mask =
        e.mask_path.empty() ? "" : fs::path(e.mask_path).lexically_proximate(base).string();
    w.row({vol, e.label, mask, e.split});
  }
}

std::vector<LayerSurfaces> load_surfaces_csv(const fs::path& csv) {
  const auto rows = read_csv(csv);
  if (rows.empty() || rows.front().size() < 4 || rows.front()[0] != "slice")
    throw FormatError("surfaces '" + csv.string() + "' lacks the slice,col,ilm_row,bm_row header");
  std::map<int, std::map<int, std::pair<int, int>>> by_slice;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() < 4) throw FormatError("surfaces row " + std::to_string(i) + " is short");
    by_slice[std::stoi(r[0])][std::stoi(r[1])] = {std::stoi(r[2]), std::stoi(r[3])};
  }
  std::vector<LayerSurfaces> out;
  int expected = 0;
  for (const auto& [slice, cols] : by_slice) {
    if (slice != expected++)
      throw FormatError("surfaces '" + csv.string() + "' has non-contiguous slice indices");
    LayerSurfaces s;
    int expected_col = 0;
    for (const auto& [col, rows_pair] : cols) {
      if (col != expected_col++)
        throw FormatError("surfaces '" + csv.string() + "' has non-contiguous columns");
      s.ilm.push_back(rows_pair.first);
      s.bm.push_back(rows_pair.second);
    }
    out.push_back(std::move(s));
  }
  return out;
}

void save_surfaces_csv(const std::vector<LayerSurfaces>& surfaces, const fs::path& csv) {
  CsvWriter w(csv);
  w.row({"slice", "col", "ilm_row", "bm_row"});
  for (std::size_t s = 0; s < surfaces.size(); ++s)
    for (int c = 0; c < surfaces[s].width(); ++c)
      w.row({std::to_string(s), std::to_string(c), std::to_string(surfaces[s].ilm[c]),
             std::to_string(surfaces[s].bm[c])});
}

}  // namespace octa::io
