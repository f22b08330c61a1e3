#include "octa/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <json.hpp>
#include <set>

#include "octa/cluster.hpp"
#include "octa/csv.hpp"
#include "octa/eval.hpp"
#include "octa/features.hpp"
#include "octa/forest.hpp"
#include "octa/io.hpp"
#include "octa/model_io.hpp"
#include "octa/ocsvm.hpp"
#include "octa/pgm.hpp"
#include "octa/sidecar.hpp"

namespace octa::pipe {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Locking and run records
// ---------------------------------------------------------------------------

class StageLock {
 public:
  explicit StageLock(const fs::path& run_dir) : lock_path_(run_dir / ".octa_lock") {
    fs::create_directories(run_dir);
    if (fs::exists(lock_path_))
      throw Error("another pipeline appears to own '" + run_dir.string() +
                  "'; remove " + lock_path_.string() + " if it is stale");
    std::ofstream out(lock_path_);
    out << "locked\n";
  }
  ~StageLock() {
    std::error_code ec;
    fs::remove(lock_path_, ec);
  }
  StageLock(const StageLock&) = delete;
  StageLock& operator=(const StageLock&) = delete;

 private:
  fs::path lock_path_;
};

fs::path record_path(const PipelineConfig& cfg, const std::string& stage) {
  return cfg.run_dir / "run-records" / (stage + ".json");
}

void require_stage(const PipelineConfig& cfg, const std::string& needed,
                   const std::string& current) {
  if (!fs::exists(record_path(cfg, needed)))
    throw PrerequisiteError("stage '" + current + "' needs the outputs of '" + needed +
                            "'; run `octa " + needed + " --config <file>` first");
}

void write_record(const PipelineConfig& cfg, const std::string& stage,
                  double wall_time_s, json extra = json::object()) {
  fs::create_directories(cfg.run_dir / "run-records");
  json record;
  record["stage"] = stage;
  record["version"] = kVersion;
  record["profile"] = cfg.profile;
  record["seed"] = cfg.seed;
  record["config_hash"] = cfg.config_hash();
  record["config"] = json::parse(cfg.to_json_string());
  record["wall_time_s"] = wall_time_s;
  const auto now = std::chrono::system_clock::now();
  record["completed_unix"] =
      std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch()).count();
  record["details"] = std::move(extra);
  std::ofstream out(record_path(cfg, stage));
  out << record.dump(2) << "\n";
}

class StageScope {
 public:
  StageScope(const PipelineConfig& cfg, std::string stage)
      : cfg_(cfg), stage_(std::move(stage)), lock_(cfg.run_dir),
        start_(std::chrono::steady_clock::now()) {}

  void finish(json details = json::object()) {
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    write_record(cfg_, stage_, wall, std::move(details));
  }

 private:
  const PipelineConfig& cfg_;
  std::string stage_;
  StageLock lock_;
  std::chrono::steady_clock::time_point start_;
};

std::string zero3(int n) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%03d", n);
  return buf;
}

// ---------------------------------------------------------------------------
// Manifest helpers
// ---------------------------------------------------------------------------

std::string volume_id(const ManifestEntry& entry) {
  return fs::path(entry.volume_path).filename().string();
}

DatasetManifest load_manifest_checked(const PipelineConfig& cfg,
                                      const std::string& stage) {
  const fs::path path = cfg.manifest_path();
  if (!fs::exists(path))
    throw PrerequisiteError("stage '" + stage + "' needs the dataset manifest '" +
                            path.string() + "'; run `octa synth` or point "
                            "`manifest` at existing data");
  DatasetManifest manifest = io::load_manifest(path);
  std::set<std::string> seen;
  for (const auto& e : manifest.entries)
    if (!seen.insert(volume_id(e)).second)
      throw ValueError("duplicate volume directory name '" + volume_id(e) +
                       "' in the manifest");
  return manifest;
}

std::vector<const ManifestEntry*> entries_in_split(const DatasetManifest& manifest,
                                                   const std::string& split) {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : manifest.entries)
    if (e.split == split) out.push_back(&e);
  return out;
}

// ---------------------------------------------------------------------------
// Preprocessed artifacts
// ---------------------------------------------------------------------------

struct PreprocessedSlice {
  NormalizedBScan norm;
  LayerSurfaces surfaces;  // flattened frame
  SuperpixelMap sp;
  std::vector<int> shifts;  // per-column flatten shift, for mapping annotations
};

struct PreprocessedVolume {
  std::string id;
  std::array<double, 3> spacing_um{};
  std::vector<PreprocessedSlice> slices;
};

fs::path preprocessed_dir(const PipelineConfig& cfg, const std::string& id) {
  return cfg.run_dir / "preprocessed" / id;
}

void save_preprocessed(const PipelineConfig& cfg, const PreprocessedVolume& vol) {
  const fs::path dir = preprocessed_dir(cfg, vol.id);
  fs::remove_all(dir);
  fs::create_directories(dir);

  io::write_sidecar(dir / "meta.txt",
                    {{"id", vol.id},
                     {"spacing_x_um", io::fmt_g(vol.spacing_um[0])},
                     {"spacing_y_um", io::fmt_g(vol.spacing_um[1])},
                     {"spacing_z_um", io::fmt_g(vol.spacing_um[2])},
                     {"n_slices", std::to_string(vol.slices.size())}});

  std::vector<LayerSurfaces> surfaces;
  io::CsvWriter centers(dir / "centers.csv");
  centers.row({"slice", "superpixel", "row", "col"});
  io::CsvWriter shifts(dir / "shifts.csv");
  shifts.row({"slice", "col", "shift"});

  for (std::size_t s = 0; s < vol.slices.size(); ++s) {
    const auto& slice = vol.slices[s];
    surfaces.push_back(slice.surfaces);

    Image<std::uint16_t> quantized(slice.norm.width(), slice.norm.height());
    for (std::size_t i = 0; i < quantized.size(); ++i)
      quantized.data()[i] = static_cast<std::uint16_t>(
          std::lround(slice.norm.pixels.data()[i] * 65535.0f));
    io::write_pgm(dir / ("norm_" + zero3(static_cast<int>(s)) + ".pgm"), quantized,
                  65535);

    Image<std::uint16_t> sp_img(slice.sp.labels.width(), slice.sp.labels.height());
    for (std::size_t i = 0; i < sp_img.size(); ++i) {
      const auto v = slice.sp.labels.data()[i];
      sp_img.data()[i] = static_cast<std::uint16_t>(v < 0 ? 0 : v + 1);
    }
    io::write_pgm(dir / ("sp_" + zero3(static_cast<int>(s)) + ".pgm"), sp_img, 65535);

    for (std::size_t k = 0; k < slice.sp.centers.size(); ++k)
      centers.row({std::to_string(s), std::to_string(k),
                   io::fmt_double(slice.sp.centers[k].first, 4),
                   io::fmt_double(slice.sp.centers[k].second, 4)});
    for (std::size_t c = 0; c < slice.shifts.size(); ++c)
      shifts.row({std::to_string(s), std::to_string(c),
                  std::to_string(slice.shifts[c])});
  }
  io::save_surfaces_csv(surfaces, dir / "surfaces.csv");
}

PreprocessedVolume load_preprocessed(const PipelineConfig& cfg, const std::string& id,
                                     const std::string& stage) {
  const fs::path dir = preprocessed_dir(cfg, id);
  if (!fs::exists(dir / "meta.txt"))
    throw PrerequisiteError("stage '" + stage + "' needs preprocessed volume '" + id +
                            "'; run `octa preprocess --config <file>` first");
  PreprocessedVolume vol;
  const auto meta = io::read_sidecar(dir / "meta.txt");
  vol.id = id;
  vol.spacing_um = {std::stod(meta.at("spacing_x_um")),
                    std::stod(meta.at("spacing_y_um")),
                    std::stod(meta.at("spacing_z_um"))};
  const int n_slices = std::stoi(meta.at("n_slices"));

  const auto surfaces = io::load_surfaces_csv(dir / "surfaces.csv");
  if (static_cast<int>(surfaces.size()) != n_slices)
    throw FormatError("surfaces.csv slice count mismatch for '" + id + "'");

  std::vector<std::vector<std::pair<float, float>>> centers(n_slices);
  for (const auto& row : io::read_csv(dir / "centers.csv")) {
    if (row[0] == "slice") continue;
    const int s = std::stoi(row[0]);
    centers[s].emplace_back(std::stof(row[2]), std::stof(row[3]));
  }
  std::vector<std::vector<int>> shifts(n_slices);
  for (const auto& row : io::read_csv(dir / "shifts.csv")) {
    if (row[0] == "slice") continue;
    shifts[std::stoi(row[0])].push_back(std::stoi(row[2]));
  }

  for (int s = 0; s < n_slices; ++s) {
    PreprocessedSlice slice;
    const io::PgmImage norm = io::read_pgm(dir / ("norm_" + zero3(s) + ".pgm"));
    slice.norm.pixels = Image<float>(norm.pixels.width(), norm.pixels.height());
    for (std::size_t i = 0; i < slice.norm.pixels.size(); ++i)
      slice.norm.pixels.data()[i] =
          static_cast<float>(norm.pixels.data()[i]) / 65535.0f;
    slice.norm.volume_id = id;
    slice.norm.slice = s;

    const io::PgmImage sp = io::read_pgm(dir / ("sp_" + zero3(s) + ".pgm"));
    slice.sp.labels = Image<std::int32_t>(sp.pixels.width(), sp.pixels.height());
    for (std::size_t i = 0; i < slice.sp.labels.size(); ++i)
      slice.sp.labels.data()[i] = static_cast<std::int32_t>(sp.pixels.data()[i]) - 1;
    slice.sp.centers = centers[s];
    slice.surfaces = surfaces[s];
    slice.surfaces.smoothness_bound = 4;  // flattened-frame bound
    slice.shifts = shifts[s];
    vol.slices.push_back(std::move(slice));
  }
  return vol;
}

// Patch pairs at every superpixel center, slices ascending then superpixel id
// ascending, with parallel per-superpixel bookkeeping.
struct VolumePatches {
  std::vector<feat::PatchPair> pairs;
  std::vector<int> slice_of;      // per pair
  std::vector<int> sp_of;         // per pair
  std::vector<long long> pixels;  // per pair: superpixel pixel count
};

VolumePatches extract_volume_patches(const PreprocessedVolume& vol) {
  VolumePatches out;
  for (std::size_t s = 0; s < vol.slices.size(); ++s) {
    const auto& slice = vol.slices[s];
    std::vector<long long> counts(slice.sp.centers.size(), 0);
    for (const auto v : slice.sp.labels.data())
      if (v >= 0) ++counts[v];
    for (std::size_t k = 0; k < slice.sp.centers.size(); ++k) {
      const int row = static_cast<int>(std::lround(slice.sp.centers[k].first));
      const int col = static_cast<int>(std::lround(slice.sp.centers[k].second));
      out.pairs.push_back(feat::extract_patch_pair(slice.norm, row, col));
      out.slice_of.push_back(static_cast<int>(s));
      out.sp_of.push_back(static_cast<int>(k));
      out.pixels.push_back(counts[k]);
    }
  }
  return out;
}

// Annotation mask carried into the flattened frame with the stored shifts.
AnnotationMask flatten_mask(const AnnotationMask& mask,
                            const std::vector<std::vector<int>>& shifts) {
  AnnotationMask out;
  out.legend = mask.legend;
  for (int s = 0; s < mask.n_slices(); ++s) {
    const auto& src = mask.slices[s];
    Image<std::uint16_t> dst(src.width(), src.height(), 0);
    const auto& col_shift = shifts[s];
    for (int r = 0; r < src.height(); ++r) {
      for (int c = 0; c < src.width(); ++c) {
        if (!src.at(r, c)) continue;
        const int rr = r + col_shift[c];
        if (rr >= 0 && rr < src.height()) dst.at(rr, c) = src.at(r, c);
      }
    }
    out.slices.push_back(std::move(dst));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embedding + segmentation artifacts
// ---------------------------------------------------------------------------

fs::path model_path(const PipelineConfig& cfg, const std::string& name) {
  return cfg.run_dir / "models" / (name + ".octm");
}

fs::path segment_dir(const PipelineConfig& cfg, const std::string& embedder,
                     const std::string& id) {
  return cfg.run_dir / "segment" / embedder / id;
}

void save_feature_matrix(const fs::path& path, const Eigen::MatrixXf& Z,
                         const std::string& embedder) {
  io::ModelContainer c;
  c.kind = "features";
  c.attrs["embedder"] = embedder;
  c.matrices["Z"] = Z;
  c.save(path);
}

Eigen::MatrixXf load_feature_matrix(const fs::path& path) {
  const io::ModelContainer c = io::ModelContainer::load(path);
  if (c.kind != "features")
    throw FormatError("'" + path.string() + "' is not a feature matrix container");
  return c.matrix("Z");
}

struct SegmentationRecord {
  Eigen::MatrixXf Z;  // one row per superpixel
  std::vector<int> slice_of, sp_of, label_of;
  std::vector<long long> pixels;
};

void save_segmentation(const fs::path& path, const SegmentationRecord& rec,
                       const std::string& embedder, double nu) {
  io::ModelContainer c;
  c.kind = "segmentation";
  c.attrs["embedder"] = embedder;
  c.attrs["nu"] = io::fmt_g(nu);
  c.matrices["Z"] = rec.Z;
  Eigen::MatrixXf meta(rec.Z.rows(), 4);
  for (Eigen::Index i = 0; i < meta.rows(); ++i) {
    meta(i, 0) = static_cast<float>(rec.slice_of[i]);
    meta(i, 1) = static_cast<float>(rec.sp_of[i]);
    meta(i, 2) = static_cast<float>(rec.pixels[i]);
    meta(i, 3) = static_cast<float>(rec.label_of[i]);
  }
  c.matrices["meta"] = std::move(meta);
  c.save(path);
}

SegmentationRecord load_segmentation(const fs::path& path) {
  const io::ModelContainer c = io::ModelContainer::load(path);
  if (c.kind != "segmentation")
    throw FormatError("'" + path.string() + "' is not a segmentation container");
  SegmentationRecord rec;
  rec.Z = c.matrix("Z");
  const Eigen::MatrixXf& meta = c.matrix("meta");
  for (Eigen::Index i = 0; i < meta.rows(); ++i) {
    rec.slice_of.push_back(static_cast<int>(meta(i, 0)));
    rec.sp_of.push_back(static_cast<int>(meta(i, 1)));
    rec.pixels.push_back(static_cast<long long>(meta(i, 2)));
    rec.label_of.push_back(static_cast<int>(meta(i, 3)));
  }
  return rec;
}

// Fixed qualitative palette for cluster overlays and map sidecars.
const std::vector<Rgb> kPalette = {
    {230, 25, 75},  {60, 180, 75},   {255, 225, 25}, {0, 130, 200},
    {245, 130, 48}, {145, 30, 180},  {70, 240, 240}, {240, 50, 230},
    {210, 245, 60}, {250, 190, 212}, {0, 128, 128},  {220, 190, 255},
    {170, 110, 40}, {255, 250, 200}, {128, 0, 0},    {170, 255, 195},
    {128, 128, 0},  {255, 215, 180}, {0, 0, 128},    {128, 128, 128}};

// Normal retina tinted red; anomalies blue, or palette-colored per cluster.
Image<Rgb> render_overlay(const PreprocessedSlice& slice,
                          const std::vector<int>& sp_values, bool cluster_colors) {
  const int w = slice.norm.width(), h = slice.norm.height();
  Image<Rgb> out(w, h);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const auto g = static_cast<std::uint8_t>(
          std::lround(slice.norm.pixels.at(r, c) * 255.0f));
      Rgb px{g, g, g};
      const int sp = slice.sp.labels.at(r, c);
      if (sp >= 0 && sp < static_cast<int>(sp_values.size())) {
        const int v = sp_values[sp];
        const auto boost = [](std::uint8_t base, std::uint8_t tint) {
          return static_cast<std::uint8_t>(
              std::min(255, (2 * base + 3 * tint) / 4 + 40));
        };
        if (v < 0) {
          px.r = boost(g, 200);
        } else if (!cluster_colors) {
          px.b = boost(g, 200);
        } else {
          const Rgb color = kPalette[v % kPalette.size()];
          px.r = boost(g, color.r);
          px.g = boost(g, color.g);
          px.b = boost(g, color.b);
        }
      }
      out.at(r, c) = px;
    }
  }
  return out;
}

std::unique_ptr<feat::Embedder> load_embedder_named(const PipelineConfig& cfg,
                                                    const std::string& name,
                                                    const std::string& stage) {
  const fs::path path = model_path(cfg, name);
  if (!fs::exists(path))
    throw PrerequisiteError("stage '" + stage + "' needs the trained embedding '" +
                            name + "'; run `octa train-features --config <file>` first");
  return feat::load_embedder(path);
}

svm::ValidationVolume build_validation_volume(const PipelineConfig& cfg,
                                              const feat::Embedder& embedder,
                                              const ManifestEntry& entry,
                                              const std::string& stage) {
  const PreprocessedVolume vol = load_preprocessed(cfg, volume_id(entry), stage);
  const AnnotationMask mask = io::load_mask(entry.mask_path);
  std::vector<std::vector<int>> shifts;
  shifts.reserve(vol.slices.size());
  for (const auto& s : vol.slices) shifts.push_back(s.shifts);
  if (mask.n_slices() != static_cast<int>(vol.slices.size()))
    throw ShapeError("mask slice count does not match volume '" + vol.id + "'");
  const AnnotationMask flat = flatten_mask(mask, shifts);

  VolumePatches patches = extract_volume_patches(vol);
  svm::ValidationVolume out;
  out.embeddings = feat::embed_dataset(embedder, patches.pairs);
  out.total_pixels = patches.pixels;
  out.anomalous_pixels.assign(patches.pairs.size(), 0);

  // Index (slice, sp) -> row to accumulate annotated pixels per superpixel.
  std::map<std::pair<int, int>, std::size_t> index;
  for (std::size_t i = 0; i < patches.pairs.size(); ++i)
    index[{patches.slice_of[i], patches.sp_of[i]}] = i;
  for (std::size_t s = 0; s < vol.slices.size(); ++s) {
    const auto& labels = vol.slices[s].sp.labels;
    const auto& mslice = flat.slices[s];
    for (int r = 0; r < labels.height(); ++r) {
      for (int c = 0; c < labels.width(); ++c) {
        const int sp = labels.at(r, c);
        if (sp < 0 || !mslice.at(r, c)) continue;
        out.anomalous_pixels[index.at({static_cast<int>(s), sp})] += 1;
      }
    }
  }
  return out;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

PipelineConfig PipelineConfig::defaults(const std::string& profile) {
  PipelineConfig cfg;
  cfg.profile = profile;
  cfg.nu_grid = svm::default_nu_grid();
  for (const auto& stage : kStageOrder) cfg.stages[stage] = true;
  if (profile == "desk") {
    cfg.scale_arch = {512, 256, 128};
    cfg.fuse_dim = 64;
    cfg.train.lr_schedule = {{15, 1e-4}, {15, 1e-5}};
    cfg.patches_per_volume = 250;
    cfg.c_max = 10;
    cfg.svm_subsample_threshold = 6000;
    cfg.svm_subsample_size = 6000;
    cfg.eval_max_volumes = 10;
  } else if (profile == "paper") {
    cfg.scale_arch = {2048, 1024, 512};
    cfg.fuse_dim = 256;
    cfg.train.lr_schedule = {{150, 1e-4}, {150, 1e-5}};
    cfg.patches_per_volume = 1000;
    cfg.c_max = 30;
    cfg.svm_subsample_threshold = 300000;
    cfg.svm_subsample_size = 100000;
    cfg.eval_max_volumes = 26;
  } else {
    throw ValueError("unknown profile '" + profile + "' (expected desk or paper)");
  }
  cfg.train.minibatch = 50;
  cfg.train.momentum = 0.9;
  cfg.train.corruption = 0.5;
  return cfg;
}

PipelineConfig PipelineConfig::from_file(const fs::path& config_path,
                                         std::optional<std::uint64_t> seed_override,
                                         std::optional<std::string> profile_override) {
  std::ifstream in(config_path);
  if (!in) throw FormatError("cannot open config '" + config_path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError("config '" + config_path.string() + "' is not valid JSON: " +
                      e.what());
  }

  const std::string profile =
      profile_override.value_or(j.value("profile", std::string("desk")));
  PipelineConfig cfg = defaults(profile);

  const fs::path base = config_path.parent_path();
  const auto resolve = [&](const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : (base / path).lexically_normal();
  };

  if (j.contains("run_dir")) cfg.run_dir = resolve(j.at("run_dir").get<std::string>());
  if (j.contains("manifest")) cfg.manifest = resolve(j.at("manifest").get<std::string>());
  cfg.seed = seed_override.value_or(j.value("seed", cfg.seed));
  cfg.train.seed = cfg.seed;

  if (j.contains("synth")) {
    const json& s = j.at("synth");
    cfg.phantom.width = s.value("width", cfg.phantom.width);
    cfg.phantom.height = s.value("height", cfg.phantom.height);
    cfg.phantom.n_bscans = s.value("bscans", cfg.phantom.n_bscans);
    cfg.phantom.speckle_sigma = s.value("speckle_sigma", cfg.phantom.speckle_sigma);
    cfg.phantom.surface_amplitude =
        s.value("surface_amplitude", cfg.phantom.surface_amplitude);
    cfg.phantom.band_jitter = s.value("band_jitter", cfg.phantom.band_jitter);
    if (s.contains("spacing")) {
      const auto sp = s.at("spacing").get<std::vector<double>>();
      if (sp.size() != 3) throw ValueError("synth.spacing needs three values");
      cfg.phantom.spacing_um = {sp[0], sp[1], sp[2]};
    }
    if (s.contains("plan")) {
      cfg.plan.clear();
      for (const auto& e : s.at("plan"))
        cfg.plan.push_back({e.at("label").get<std::string>(),
                            e.at("split").get<std::string>(),
                            e.at("count").get<int>()});
    }
  }

  if (j.contains("preprocess")) {
    const json& p = j.at("preprocess");
    if (p.contains("superpixel_mode")) {
      const std::string mode = p.at("superpixel_mode").get<std::string>();
      if (mode == "grid")
        cfg.superpixel_mode = prep::SuperpixelMode::Grid;
      else if (mode == "slic")
        cfg.superpixel_mode = prep::SuperpixelMode::Slic;
      else
        throw ValueError("preprocess.superpixel_mode must be grid or slic");
    }
    cfg.superpixel_step = p.value("step", cfg.superpixel_step);
    cfg.superpixel_iters = p.value("iters", cfg.superpixel_iters);
    if (p.contains("surfaces")) {
      const std::string s = p.at("surfaces").get<std::string>();
      if (s == "sidecar")
        cfg.surfaces_from_sidecar = true;
      else if (s == "compute")
        cfg.surfaces_from_sidecar = false;
      else
        throw ValueError("preprocess.surfaces must be compute or sidecar");
    }
  }

  if (j.contains("features")) {
    const json& f = j.at("features");
    if (f.contains("embedders"))
      cfg.embedders = f.at("embedders").get<std::vector<std::string>>();
    cfg.patches_per_volume = f.value("patches_per_volume", cfg.patches_per_volume);
    cfg.max_patches = f.value("max_patches", cfg.max_patches);
    if (f.contains("scale_arch"))
      cfg.scale_arch = f.at("scale_arch").get<std::vector<int>>();
    cfg.fuse_dim = f.value("fuse_dim", cfg.fuse_dim);
    cfg.pca_fixed_k = f.value("pca_fixed_k", cfg.pca_fixed_k);
    cfg.pca_variance = f.value("pca_variance", cfg.pca_variance);
    cfg.train.minibatch = f.value("minibatch", cfg.train.minibatch);
    cfg.train.momentum = f.value("momentum", cfg.train.momentum);
    cfg.train.corruption = f.value("corruption", cfg.train.corruption);
    if (f.contains("lr_schedule")) {
      cfg.train.lr_schedule.clear();
      for (const auto& phase : f.at("lr_schedule"))
        cfg.train.lr_schedule.push_back(
            {phase.at("epochs").get<int>(), phase.at("rate").get<double>()});
    }
  }

  if (j.contains("svm")) {
    const json& s = j.at("svm");
    if (s.contains("nu_grid")) cfg.nu_grid = s.at("nu_grid").get<std::vector<double>>();
    cfg.svm_subsample_threshold =
        s.value("subsample_threshold", cfg.svm_subsample_threshold);
    cfg.svm_subsample_size = s.value("subsample_size", cfg.svm_subsample_size);
  }

  if (j.contains("cluster")) {
    const json& c = j.at("cluster");
    cfg.c_min = c.value("c_min", cfg.c_min);
    cfg.c_max = c.value("c_max", cfg.c_max);
    cfg.cluster_restarts = c.value("restarts", cfg.cluster_restarts);
    cfg.primary_label = c.value("primary_label", cfg.primary_label);
  }

  if (j.contains("forest")) {
    const json& f = j.at("forest");
    cfg.n_trees = f.value("n_trees", cfg.n_trees);
    cfg.train_per_class = f.value("train_per_class", cfg.train_per_class);
  }

  if (j.contains("output")) {
    const json& o = j.at("output");
    cfg.export_csv = o.value("export_csv", cfg.export_csv);
    cfg.overlays = o.value("overlays", cfg.overlays);
    cfg.eval_max_volumes = o.value("eval_max_volumes", cfg.eval_max_volumes);
  }

  if (j.contains("stages"))
    for (const auto& [stage, on] : j.at("stages").items()) {
      if (!cfg.stages.count(stage)) throw ValueError("unknown stage '" + stage + "'");
      cfg.stages[stage] = on.get<bool>();
    }

  return cfg;
}

std::string PipelineConfig::to_json_string() const {
  json j;
  j["run_dir"] = run_dir.string();
  j["manifest"] = manifest_path().string();
  j["seed"] = seed;
  j["profile"] = profile;
  j["synth"] = {{"width", phantom.width},
                {"height", phantom.height},
                {"bscans", phantom.n_bscans},
                {"speckle_sigma", phantom.speckle_sigma},
                {"surface_amplitude", phantom.surface_amplitude},
                {"band_jitter", phantom.band_jitter},
                {"spacing", phantom.spacing_um}};
  json plan_json = json::array();
  for (const auto& p : plan)
    plan_json.push_back({{"label", p.label}, {"split", p.split}, {"count", p.count}});
  j["synth"]["plan"] = std::move(plan_json);
  j["preprocess"] = {
      {"superpixel_mode",
       superpixel_mode == prep::SuperpixelMode::Grid ? "grid" : "slic"},
      {"step", superpixel_step},
      {"iters", superpixel_iters},
      {"surfaces", surfaces_from_sidecar ? "sidecar" : "compute"}};
  json schedule = json::array();
  for (const auto& p : train.lr_schedule)
    schedule.push_back({{"epochs", p.epochs}, {"rate", p.rate}});
  j["features"] = {{"embedders", embedders},
                   {"patches_per_volume", patches_per_volume},
                   {"max_patches", max_patches},
                   {"scale_arch", scale_arch},
                   {"fuse_dim", fuse_dim},
                   {"pca_fixed_k", pca_fixed_k},
                   {"pca_variance", pca_variance},
                   {"minibatch", train.minibatch},
                   {"momentum", train.momentum},
                   {"corruption", train.corruption},
                   {"lr_schedule", std::move(schedule)}};
  j["svm"] = {{"nu_grid", nu_grid},
              {"subsample_threshold", svm_subsample_threshold},
              {"subsample_size", svm_subsample_size}};
  j["cluster"] = {{"c_min", c_min},
                  {"c_max", c_max},
                  {"restarts", cluster_restarts},
                  {"primary_label", primary_label}};
  j["forest"] = {{"n_trees", n_trees}, {"train_per_class", train_per_class}};
  j["output"] = {{"export_csv", export_csv},
                 {"overlays", overlays},
                 {"eval_max_volumes", eval_max_volumes}};
  j["stages"] = stages;
  return j.dump(2);
}

std::string PipelineConfig::config_hash() const {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(to_json_string())));
  return buf;
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

void cmd_synth(const PipelineConfig& cfg) {
  StageScope scope(cfg, "synth");
  if (cfg.plan.empty())
    throw ValueError("synth plan is empty; add synth.plan entries to the config");
  const fs::path data_dir = cfg.run_dir / "data";
  fs::remove_all(data_dir);
  const DatasetManifest manifest =
      synth::generate_dataset(cfg.plan, cfg.phantom, cfg.seed, data_dir);
  json details;
  details["n_volumes"] = manifest.entries.size();
  scope.finish(std::move(details));
}

void cmd_preprocess(const PipelineConfig& cfg) {
  StageScope scope(cfg, "preprocess");
  const DatasetManifest manifest = load_manifest_checked(cfg, "preprocess");
  fs::remove_all(cfg.run_dir / "preprocessed");

  std::vector<std::string> failed;
  for (const auto& entry : manifest.entries) {
    const OctVolume volume = io::load_volume(entry.volume_path);
    PreprocessedVolume pre;
    pre.id = volume_id(entry);
    pre.spacing_um = volume.spacing_um;
    try {
      std::vector<LayerSurfaces> sidecar;
      if (cfg.surfaces_from_sidecar) {
        const fs::path sidecar_path = fs::path(entry.volume_path) / "surfaces.csv";
        if (!fs::exists(sidecar_path))
          throw PrerequisiteError("surfaces sidecar missing for '" + pre.id + "'");
        sidecar = io::load_surfaces_csv(sidecar_path);
        if (static_cast<int>(sidecar.size()) != volume.n_slices())
          throw ShapeError("surfaces sidecar slice count mismatch for '" + pre.id + "'");
      }
      for (int s = 0; s < volume.n_slices(); ++s) {
        const BScan& bscan = volume.bscans[s];
        const LayerSurfaces surfaces =
            cfg.surfaces_from_sidecar ? sidecar[s] : prep::find_surfaces(bscan);
        const prep::FlattenResult flat = prep::flatten(bscan, surfaces);
        PreprocessedSlice slice;
        slice.norm = prep::normalize(flat.bscan);
        slice.norm.volume_id = pre.id;
        slice.norm.slice = s;
        slice.surfaces = flat.surfaces;
        slice.sp = prep::oversegment(slice.norm, flat.surfaces, cfg.superpixel_mode,
                                     cfg.superpixel_step, cfg.superpixel_iters);
        slice.shifts.resize(bscan.width());
        for (int c = 0; c < bscan.width(); ++c)
          slice.shifts[c] = flat.target_row - surfaces.bm[c];
        pre.slices.push_back(std::move(slice));
      }
      save_preprocessed(cfg, pre);
    } catch (const SegmentationError& e) {
      // Flag the volume and keep going; downstream stages skip it.
      failed.push_back(pre.id + ": " + e.what());
    }
  }
  json details;
  details["failed_volumes"] = failed;
  scope.finish(std::move(details));
}

namespace {

bool is_preprocessed(const PipelineConfig& cfg, const ManifestEntry& entry) {
  return fs::exists(preprocessed_dir(cfg, volume_id(entry)) / "meta.txt");
}

void write_loss_csv(const fs::path& path, const std::vector<nn::EpochStats>& trace) {
  io::CsvWriter w(path);
  w.row({"epoch", "mean_loss", "lr"});
  for (const auto& e : trace)
    w.row({std::to_string(e.epoch), io::fmt_g(e.mean_loss), io::fmt_g(e.lr)});
}

}  // namespace

void cmd_train_features(const PipelineConfig& cfg) {
  StageScope scope(cfg, "train-features");
  require_stage(cfg, "preprocess", "train-features");
  const DatasetManifest manifest = load_manifest_checked(cfg, "train-features");

  const fs::path features_dir = cfg.run_dir / "features";
  fs::remove_all(features_dir);
  fs::create_directories(features_dir);
  fs::create_directories(cfg.run_dir / "models");

  // Sample training patch pairs at superpixel centers of the train split.
  std::vector<feat::PatchPair> pairs;
  Rng rng_sample(Rng::derive(cfg.seed, "patch_sample"));
  int used_volumes = 0;
  for (const auto* entry : entries_in_split(manifest, "train")) {
    if (!is_preprocessed(cfg, *entry)) continue;
    const PreprocessedVolume vol =
        load_preprocessed(cfg, volume_id(*entry), "train-features");
    VolumePatches patches = extract_volume_patches(vol);
    ++used_volumes;
    const int total = static_cast<int>(patches.pairs.size());
    if (total <= cfg.patches_per_volume) {
      for (auto& p : patches.pairs) pairs.push_back(std::move(p));
    } else {
      auto keep = rng_sample.sample_indices(total, cfg.patches_per_volume);
      std::sort(keep.begin(), keep.end());
      for (const int k : keep) pairs.push_back(std::move(patches.pairs[k]));
    }
  }
  if (pairs.empty())
    throw PrerequisiteError("no preprocessed training volumes found; check the "
                            "manifest train split and run `octa preprocess`");
  if (static_cast<long>(pairs.size()) > cfg.max_patches) {
    Rng rng_cap(Rng::derive(cfg.seed, "patch_cap"));
    auto keep = rng_cap.sample_indices(static_cast<int>(pairs.size()),
                                       static_cast<int>(cfg.max_patches));
    std::sort(keep.begin(), keep.end());
    std::vector<feat::PatchPair> capped;
    capped.reserve(keep.size());
    for (const int k : keep) capped.push_back(std::move(pairs[k]));
    pairs = std::move(capped);
  }

  const Eigen::MatrixXf Xs = feat::patch_matrix(pairs, true);
  const Eigen::MatrixXf Xl = feat::patch_matrix(pairs, false);

  json details;
  details["n_patches"] = pairs.size();
  details["n_train_volumes"] = used_volumes;

  for (const std::string& name : cfg.embedders) {
    std::unique_ptr<feat::Embedder> embedder;
    if (name == "ddae") {
      nn::TrainConfig tc = cfg.train;
      tc.seed = Rng::derive(cfg.seed, "ddae_small");
      auto small = nn::train_ddae(Xs, cfg.scale_arch, tc);
      tc.seed = Rng::derive(cfg.seed, "ddae_large");
      auto large = nn::train_ddae(Xl, cfg.scale_arch, tc);

      // The scale encoders stay fixed while the fusion stack trains on their
      // concatenated codes.
      const Eigen::MatrixXf ys = small.model.encode(Xs);
      const Eigen::MatrixXf yl = large.model.encode(Xl);
      Eigen::MatrixXf codes(ys.rows(), ys.cols() + yl.cols());
      codes << ys, yl;
      tc.seed = Rng::derive(cfg.seed, "ddae_fuse");
      auto fuse = nn::train_ddae(codes, std::vector<int>{cfg.fuse_dim}, tc);

      write_loss_csv(features_dir / "loss_ddae_small.csv", small.trace);
      write_loss_csv(features_dir / "loss_ddae_large.csv", large.trace);
      write_loss_csv(features_dir / "loss_ddae_fuse.csv", fuse.trace);

      auto composite = std::make_unique<feat::DdaeEmbedder>();
      composite->encoder = nn::compose_ddae_ent(
          std::move(small.model), std::move(large.model), std::move(fuse.model));
      embedder = std::move(composite);
    } else if (name == "pca256") {
      embedder = std::make_unique<feat::PcaModel>(
          feat::pca_fit(Xs, Xl, feat::PcaModel::Mode::FixedK, cfg.pca_fixed_k));
    } else if (name == "pca095") {
      embedder = std::make_unique<feat::PcaModel>(
          feat::pca_fit(Xs, Xl, feat::PcaModel::Mode::VarianceFraction,
                        cfg.pca_fixed_k, cfg.pca_variance));
    } else {
      throw ValueError("unknown embedder '" + name +
                       "' (expected ddae, pca256 or pca095)");
    }

    embedder->to_container().save(model_path(cfg, name));
    const Eigen::MatrixXf Z = feat::embed_dataset(*embedder, pairs);
    save_feature_matrix(features_dir / ("train_embed_" + name + ".octm"), Z, name);
    if (cfg.export_csv) {
      io::CsvWriter w(features_dir / ("train_embed_" + name + ".csv"));
      for (Eigen::Index i = 0; i < Z.rows(); ++i) {
        std::vector<std::string> row;
        for (Eigen::Index d = 0; d < Z.cols(); ++d) row.push_back(io::fmt_g(Z(i, d)));
        w.row(row);
      }
    }
    details["dims"][name] = embedder->dim();
  }
  scope.finish(std::move(details));
}

void cmd_fit_svm(const PipelineConfig& cfg) {
  StageScope scope(cfg, "fit-svm");
  require_stage(cfg, "train-features", "fit-svm");
  const DatasetManifest manifest = load_manifest_checked(cfg, "fit-svm");

  const fs::path svm_dir = cfg.run_dir / "svm";
  fs::remove_all(svm_dir);
  fs::create_directories(svm_dir);

  svm::FitOptions options;
  options.subsample_threshold = cfg.svm_subsample_threshold;
  options.subsample_size = cfg.svm_subsample_size;
  options.seed = Rng::derive(cfg.seed, "svm_subsample");

  json details;
  for (const std::string& name : cfg.embedders) {
    const auto embedder = load_embedder_named(cfg, name, "fit-svm");
    const Eigen::MatrixXf Ztrain = load_feature_matrix(
        cfg.run_dir / "features" / ("train_embed_" + name + ".octm"));

    std::vector<svm::ValidationVolume> validation;
    for (const auto* entry : entries_in_split(manifest, "validation")) {
      if (entry->mask_path.empty() || !is_preprocessed(cfg, *entry)) continue;
      validation.push_back(build_validation_volume(cfg, *embedder, *entry, "fit-svm"));
    }
    if (validation.empty())
      throw PrerequisiteError(
          "fit-svm needs annotated volumes in the validation split");

    const svm::SweepResult sweep =
        svm::sweep_nu(Ztrain, validation, cfg.nu_grid, options);

    io::CsvWriter w(svm_dir / ("sweep_" + name + ".csv"));
    w.row({"nu", "precision", "recall", "dice"});
    for (const auto& point : sweep.points) {
      if (!point.ok) continue;
      w.row({io::fmt_g(point.nu), io::fmt_double(point.mean.precision),
             io::fmt_double(point.mean.recall), io::fmt_double(point.mean.dice)});
    }
    io::save_model(sweep.best_model, model_path(cfg, "ocsvm_" + name));

    details[name]["nu"] = sweep.points[sweep.best_index].nu;
    details[name]["validation_dice"] = sweep.points[sweep.best_index].mean.dice;
    for (const auto& point : sweep.points)
      if (!point.ok) details[name]["failed_nu"].push_back(point.nu);
  }
  scope.finish(std::move(details));
}

void cmd_segment(const PipelineConfig& cfg) {
  StageScope scope(cfg, "segment");
  require_stage(cfg, "fit-svm", "segment");
  const DatasetManifest manifest = load_manifest_checked(cfg, "segment");
  fs::remove_all(cfg.run_dir / "segment");

  json details;
  for (const std::string& name : cfg.embedders) {
    const auto embedder = load_embedder_named(cfg, name, "segment");
    const fs::path svm_path = model_path(cfg, "ocsvm_" + name);
    if (!fs::exists(svm_path))
      throw PrerequisiteError("segment needs the fitted boundary for '" + name +
                              "'; run `octa fit-svm --config <file>` first");
    const auto model = io::load_model_as<svm::OcsvmModel>(svm_path);

    long long segmented = 0, anomalous = 0;
    for (const auto& entry : manifest.entries) {
      if (!is_preprocessed(cfg, entry)) continue;
      const PreprocessedVolume vol = load_preprocessed(cfg, volume_id(entry), "segment");
      VolumePatches patches = extract_volume_patches(vol);

      SegmentationRecord rec;
      rec.Z = feat::embed_dataset(*embedder, patches.pairs);
      rec.slice_of = patches.slice_of;
      rec.sp_of = patches.sp_of;
      rec.pixels = patches.pixels;
      const Eigen::VectorXf decisions = model.decision_batch(rec.Z);
      rec.label_of.resize(patches.pairs.size());
      for (std::size_t i = 0; i < patches.pairs.size(); ++i) {
        rec.label_of[i] = decisions[static_cast<Eigen::Index>(i)] < 0.0f ? 1 : 0;
        anomalous += rec.label_of[i];
      }
      segmented += static_cast<long long>(patches.pairs.size());

      const fs::path out_dir = segment_dir(cfg, name, vol.id);
      fs::create_directories(out_dir);
      save_segmentation(out_dir / "embeddings.octm", rec, name, model.nu);

      // Broadcast superpixel labels to pixels, one mask image per slice.
      std::vector<std::vector<int>> sp_label_by_slice(vol.slices.size());
      for (std::size_t s = 0; s < vol.slices.size(); ++s)
        sp_label_by_slice[s].assign(vol.slices[s].sp.centers.size(), 0);
      for (std::size_t i = 0; i < patches.pairs.size(); ++i)
        sp_label_by_slice[patches.slice_of[i]][patches.sp_of[i]] = rec.label_of[i];
      for (std::size_t s = 0; s < vol.slices.size(); ++s) {
        const auto& slice = vol.slices[s];
        Image<std::uint16_t> mask(slice.sp.labels.width(), slice.sp.labels.height(), 0);
        for (int r = 0; r < mask.height(); ++r) {
          for (int c = 0; c < mask.width(); ++c) {
            const int sp = slice.sp.labels.at(r, c);
            if (sp >= 0 && sp_label_by_slice[s][sp]) mask.at(r, c) = 1;
          }
        }
        io::write_pgm(out_dir / ("mask_" + zero3(static_cast<int>(s)) + ".pgm"), mask,
                      255);
        if (cfg.overlays) {
          std::vector<int> tint(slice.sp.centers.size());
          for (std::size_t k = 0; k < tint.size(); ++k)
            tint[k] = sp_label_by_slice[s][k] ? 0 : -1;
          io::write_ppm(out_dir / ("overlay_" + zero3(static_cast<int>(s)) + ".ppm"),
                        render_overlay(slice, tint, false));
        }
      }
    }
    details[name]["superpixels"] = segmented;
    details[name]["anomalous"] = anomalous;
  }
  scope.finish(std::move(details));
}

namespace {

fs::path categorize_dir(const PipelineConfig& cfg) { return cfg.run_dir / "categorize"; }

std::string primary_embedder(const PipelineConfig& cfg) {
  if (cfg.embedders.empty()) throw ValueError("no embedders configured");
  return cfg.embedders.front();
}

// Pooled anomalous embeddings of the categorization volumes with one label.
Eigen::MatrixXf pooled_anomalies(const PipelineConfig& cfg, const std::string& embedder,
                                 const std::vector<const ManifestEntry*>& entries,
                                 const std::string& stage) {
  std::vector<Eigen::RowVectorXf> rows;
  for (const auto* entry : entries) {
    const fs::path path =
        segment_dir(cfg, embedder, volume_id(*entry)) / "embeddings.octm";
    if (!fs::exists(path))
      throw PrerequisiteError("stage '" + stage + "' needs segmentation outputs for '" +
                              volume_id(*entry) + "'; run `octa segment` first");
    const SegmentationRecord rec = load_segmentation(path);
    for (Eigen::Index i = 0; i < rec.Z.rows(); ++i)
      if (rec.label_of[i]) rows.push_back(rec.Z.row(i));
  }
  Eigen::MatrixXf Z(static_cast<Eigen::Index>(rows.size()),
                    rows.empty() ? 0 : rows.front().cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    Z.row(static_cast<Eigen::Index>(i)) = rows[i];
  return Z;
}

}  // namespace

void cmd_categorize(const PipelineConfig& cfg) {
  StageScope scope(cfg, "categorize");
  require_stage(cfg, "segment", "categorize");
  const DatasetManifest manifest = load_manifest_checked(cfg, "categorize");
  const std::string embedder = primary_embedder(cfg);

  fs::remove_all(categorize_dir(cfg));
  fs::create_directories(categorize_dir(cfg));

  // One cluster model per label present in the categorization split, the
  // primary label first.
  std::vector<std::string> labels;
  for (const auto* e : entries_in_split(manifest, "categorization"))
    if (std::find(labels.begin(), labels.end(), e->label) == labels.end())
      labels.push_back(e->label);
  std::sort(labels.begin(), labels.end());
  if (const auto it = std::find(labels.begin(), labels.end(), cfg.primary_label);
      it != labels.end())
    std::rotate(labels.begin(), it, it + 1);
  if (labels.empty())
    throw PrerequisiteError("categorize needs volumes in the categorization split");

  cluster::FitOptions options;
  options.restarts = cfg.cluster_restarts;

  json details;
  std::map<std::string, cluster::ClusterModel> models;
  for (const std::string& label : labels) {
    std::vector<const ManifestEntry*> group;
    for (const auto* e : entries_in_split(manifest, "categorization"))
      if (e->label == label && is_preprocessed(cfg, *e)) group.push_back(e);

    const Eigen::MatrixXf anomalies =
        pooled_anomalies(cfg, embedder, group, "categorize");
    if (anomalies.rows() <= cfg.c_max)
      throw ValueError("label '" + label + "' has only " +
                       std::to_string(anomalies.rows()) +
                       " anomalous superpixels; not enough to cluster");

    auto [shifted, shift] = cluster::shift_nonnegative(anomalies);
    cluster::SelectionResult selection = cluster::select_C(
        shifted, cfg.c_min, cfg.c_max, Rng::derive(cfg.seed, "cluster_" + label),
        options);
    selection.best.shift = shift.cast<double>();

    io::CsvWriter curve(categorize_dir(cfg) / ("db_curve_" + label + ".csv"));
    curve.row({"C", "db_index"});
    for (const auto& [c, db] : selection.curve)
      curve.row({std::to_string(c), io::fmt_g(db)});

    io::save_model(selection.best, model_path(cfg, "cluster_" + label));
    details[label]["C"] = selection.best.n_clusters();
    details[label]["n_anomalies"] = anomalies.rows();
    models.emplace(label, std::move(selection.best));
  }

  // Cross-model centroid distances against the primary clustering.
  const std::string& primary = labels.front();
  for (std::size_t i = 1; i < labels.size(); ++i) {
    const Eigen::MatrixXd d =
        cluster::centroid_correspondence(models.at(primary), models.at(labels[i]));
    io::CsvWriter w(categorize_dir(cfg) /
                    ("correspondence_" + primary + "_vs_" + labels[i] + ".csv"));
    for (Eigen::Index r = 0; r < d.rows(); ++r) {
      std::vector<std::string> row;
      for (Eigen::Index c = 0; c < d.cols(); ++c) row.push_back(io::fmt_double(d(r, c)));
      w.row(row);
    }
  }

  {
    std::vector<std::pair<std::string, std::string>> palette;
    const cluster::ClusterModel& model = models.at(primary);
    for (int k = 0; k < model.n_clusters(); ++k) {
      const Rgb color = kPalette[k % kPalette.size()];
      palette.emplace_back(std::to_string(k + 1),
                           std::to_string(color.r) + " " + std::to_string(color.g) +
                               " " + std::to_string(color.b));
    }
    io::write_sidecar(categorize_dir(cfg) / "palette.txt", palette);
  }

  // Assign every segmented volume's anomalies to the primary clusters; the
  // categorization volumes additionally get label maps and overlays.
  const cluster::ClusterModel& model = models.at(primary);
  fs::create_directories(categorize_dir(cfg) / "assign");
  for (const auto& entry : manifest.entries) {
    if (!is_preprocessed(cfg, entry)) continue;
    const std::string id = volume_id(entry);
    const fs::path seg_path = segment_dir(cfg, embedder, id) / "embeddings.octm";
    if (!fs::exists(seg_path)) continue;
    const SegmentationRecord rec = load_segmentation(seg_path);

    io::CsvWriter w(categorize_dir(cfg) / "assign" / (id + ".csv"));
    w.row({"slice", "superpixel", "cluster"});
    std::map<std::pair<int, int>, int> assignment;
    for (Eigen::Index i = 0; i < rec.Z.rows(); ++i) {
      if (!rec.label_of[i]) continue;
      const int c = model.assign(rec.Z.row(i));
      assignment[{rec.slice_of[i], rec.sp_of[i]}] = c;
      w.row({std::to_string(rec.slice_of[i]), std::to_string(rec.sp_of[i]),
             std::to_string(c + 1)});
    }

    if (entry.split == "categorization") {
      const PreprocessedVolume vol = load_preprocessed(cfg, id, "categorize");
      const fs::path map_dir = categorize_dir(cfg) / "maps" / id;
      fs::create_directories(map_dir);
      for (std::size_t s = 0; s < vol.slices.size(); ++s) {
        const auto& slice = vol.slices[s];
        std::vector<int> sp_cluster(slice.sp.centers.size(), -1);
        for (const auto& [key, c] : assignment)
          if (key.first == static_cast<int>(s)) sp_cluster[key.second] = c;
        Image<std::uint16_t> map_img(slice.sp.labels.width(),
                                     slice.sp.labels.height(), 0);
        for (int r = 0; r < map_img.height(); ++r) {
          for (int c = 0; c < map_img.width(); ++c) {
            const int sp = slice.sp.labels.at(r, c);
            if (sp >= 0 && sp_cluster[sp] >= 0)
              map_img.at(r, c) = static_cast<std::uint16_t>(sp_cluster[sp] + 1);
          }
        }
        io::write_pgm(map_dir / ("cluster_" + zero3(static_cast<int>(s)) + ".pgm"),
                      map_img, 255);
        if (cfg.overlays)
          io::write_ppm(map_dir / ("overlay_" + zero3(static_cast<int>(s)) + ".ppm"),
                        render_overlay(slice, sp_cluster, true));
      }
    }
  }
  scope.finish(std::move(details));
}

namespace {

struct VolumeFeatures {
  std::string id, label;
  Eigen::VectorXf cluster_features;
  Eigen::VectorXf binary_features;
};

VolumeFeatures volume_features(const PipelineConfig& cfg, const ManifestEntry& entry,
                               int n_clusters, const std::string& stage) {
  const std::string id = volume_id(entry);
  const SegmentationRecord rec = load_segmentation(
      segment_dir(cfg, primary_embedder(cfg), id) / "embeddings.octm");

  std::map<std::pair<int, int>, int> assignment;
  const fs::path assign_path = categorize_dir(cfg) / "assign" / (id + ".csv");
  if (!fs::exists(assign_path))
    throw PrerequisiteError("stage '" + stage + "' needs cluster assignments for '" +
                            id + "'; run `octa categorize` first");
  for (const auto& row : io::read_csv(assign_path)) {
    if (row[0] == "slice") continue;
    assignment[{std::stoi(row[0]), std::stoi(row[1])}] = std::stoi(row[2]) - 1;
  }

  std::vector<int> sp_cluster(rec.Z.rows(), -1);
  std::vector<long long> sp_pixels(rec.Z.rows(), 0);
  for (Eigen::Index i = 0; i < rec.Z.rows(); ++i) {
    sp_pixels[i] = rec.pixels[i];
    if (rec.label_of[i])
      sp_cluster[i] = assignment.at({rec.slice_of[i], rec.sp_of[i]});
  }

  const auto meta = io::read_sidecar(fs::path(entry.volume_path) / "meta.txt");
  const std::array<double, 3> spacing = {std::stod(meta.at("spacing_x_um")),
                                         std::stod(meta.at("spacing_y_um")),
                                         std::stod(meta.at("spacing_z_um"))};

  VolumeFeatures out;
  out.id = id;
  out.label = entry.label;
  out.cluster_features = forest::cluster_volume_features(sp_cluster, sp_pixels,
                                                         n_clusters, spacing, false);
  out.binary_features = forest::cluster_volume_features(sp_cluster, sp_pixels,
                                                        n_clusters, spacing, true);
  return out;
}

void write_feature_csv(const fs::path& path, const std::vector<VolumeFeatures>& rows,
                       const std::vector<std::string>& names) {
  io::CsvWriter w(path);
  std::vector<std::string> header = {"volume", "label"};
  header.insert(header.end(), names.begin(), names.end());
  w.row(header);
  for (const auto& r : rows) {
    std::vector<std::string> fields = {r.id, r.label};
    for (Eigen::Index i = 0; i < r.cluster_features.size(); ++i)
      fields.push_back(io::fmt_g(r.cluster_features[i]));
    w.row(fields);
  }
}

void write_confusion_csv(const fs::path& path, const eval::ConfusionMatrix& cm) {
  io::CsvWriter w(path);
  std::vector<std::string> header = {"truth\\predicted"};
  header.insert(header.end(), cm.classes.begin(), cm.classes.end());
  w.row(header);
  for (std::size_t i = 0; i < cm.classes.size(); ++i) {
    std::vector<std::string> row = {cm.classes[i]};
    for (std::size_t j = 0; j < cm.classes.size(); ++j)
      row.push_back(std::to_string(cm.counts[i][j]));
    w.row(row);
  }
  w.row({"accuracy", io::fmt_double(cm.accuracy)});
}

}  // namespace

void cmd_classify(const PipelineConfig& cfg) {
  StageScope scope(cfg, "classify");
  require_stage(cfg, "categorize", "classify");
  const DatasetManifest manifest = load_manifest_checked(cfg, "classify");

  const fs::path out_dir = cfg.run_dir / "classify";
  fs::remove_all(out_dir);
  fs::create_directories(out_dir);

  const auto cluster_model = io::load_model_as<cluster::ClusterModel>(
      model_path(cfg, "cluster_" + cfg.primary_label));
  const int n_clusters = cluster_model.n_clusters();

  // Training rows: healthy scans from the train split plus diseased scans
  // from the categorization split, capped per class; test rows: test split.
  std::map<std::string, std::vector<const ManifestEntry*>> train_pool;
  for (const auto& e : manifest.entries) {
    if (!is_preprocessed(cfg, e)) continue;
    if (e.split == "train" || e.split == "categorization")
      train_pool[e.label].push_back(&e);
  }
  Rng rng(Rng::derive(cfg.seed, "classify_sample"));
  std::vector<const ManifestEntry*> train_entries;
  for (auto& [label, entries] : train_pool) {
    if (static_cast<int>(entries.size()) > cfg.train_per_class) {
      auto keep =
          rng.sample_indices(static_cast<int>(entries.size()), cfg.train_per_class);
      std::sort(keep.begin(), keep.end());
      for (const int k : keep) train_entries.push_back(entries[k]);
    } else {
      for (const auto* e : entries) train_entries.push_back(e);
    }
  }
  std::vector<const ManifestEntry*> test_entries;
  for (const auto& e : manifest.entries)
    if (e.split == "test" && is_preprocessed(cfg, e)) test_entries.push_back(&e);
  if (train_entries.empty() || test_entries.empty())
    throw PrerequisiteError("classify needs train/categorization and test volumes");

  std::vector<VolumeFeatures> train_rows, test_rows;
  for (const auto* e : train_entries)
    train_rows.push_back(volume_features(cfg, *e, n_clusters, "classify"));
  for (const auto* e : test_entries)
    test_rows.push_back(volume_features(cfg, *e, n_clusters, "classify"));

  std::vector<std::string> class_names;
  for (const auto& r : train_rows)
    if (std::find(class_names.begin(), class_names.end(), r.label) ==
        class_names.end())
      class_names.push_back(r.label);
  std::sort(class_names.begin(), class_names.end());
  const auto class_index = [&](const std::string& label) {
    const auto it = std::find(class_names.begin(), class_names.end(), label);
    if (it == class_names.end()) throw ValueError("unknown class '" + label + "'");
    return static_cast<int>(it - class_names.begin());
  };

  const auto build_table = [&](const std::vector<VolumeFeatures>& rows, bool binary) {
    forest::FeatureTable t;
    t.class_names = class_names;
    if (binary) {
      t.feature_names = {"anomaly_total"};
    } else {
      for (int k = 0; k < n_clusters; ++k)
        t.feature_names.push_back("cluster_" + std::to_string(k + 1));
    }
    t.X.resize(static_cast<Eigen::Index>(rows.size()),
               static_cast<Eigen::Index>(t.feature_names.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      t.X.row(static_cast<Eigen::Index>(i)) =
          (binary ? rows[i].binary_features : rows[i].cluster_features).transpose();
      t.y.push_back(class_index(rows[i].label));
    }
    return t;
  };

  const forest::FeatureTable train_cluster = build_table(train_rows, false);
  const forest::FeatureTable train_binary = build_table(train_rows, true);

  const forest::ForestModel model_cluster =
      forest::fit_forest(train_cluster, cfg.n_trees, Rng::derive(cfg.seed, "forest"));
  const forest::ForestModel model_binary = forest::fit_forest(
      train_binary, cfg.n_trees, Rng::derive(cfg.seed, "forest_binary"));

  io::save_model(model_cluster, out_dir / "forest.octm");
  io::save_model(model_binary, out_dir / "forest_binary.octm");
  write_feature_csv(out_dir / "features_train.csv", train_rows,
                    train_cluster.feature_names);
  write_feature_csv(out_dir / "features_test.csv", test_rows,
                    train_cluster.feature_names);

  json predictions = json::array();
  std::vector<std::string> pred_cluster, pred_binary, truth;
  for (const auto& row : test_rows) {
    const forest::Prediction pc = forest::predict(model_cluster, row.cluster_features);
    const forest::Prediction pb = forest::predict(model_binary, row.binary_features);
    pred_cluster.push_back(class_names[pc.cls]);
    pred_binary.push_back(class_names[pb.cls]);
    truth.push_back(row.label);
    json votes;
    for (std::size_t k = 0; k < class_names.size(); ++k)
      votes[class_names[k]] = pc.votes[k];
    predictions.push_back({{"volume", row.id},
                           {"truth", row.label},
                           {"predicted", class_names[pc.cls]},
                           {"predicted_binary", class_names[pb.cls]},
                           {"votes", std::move(votes)}});
  }
  {
    std::ofstream out(out_dir / "predictions.json");
    out << predictions.dump(2) << "\n";
  }

  const eval::ConfusionMatrix cm_cluster =
      eval::confusion(pred_cluster, truth, class_names);
  const eval::ConfusionMatrix cm_binary =
      eval::confusion(pred_binary, truth, class_names);
  write_confusion_csv(out_dir / "confusion_cluster.csv", cm_cluster);
  write_confusion_csv(out_dir / "confusion_binary.csv", cm_binary);

  const forest::ImportanceReport importance =
      forest::permutation_importance(model_cluster, train_cluster);
  {
    io::CsvWriter w(out_dir / "importance_mda.csv");
    std::vector<std::string> header = {"feature"};
    for (const auto& c : class_names) header.push_back("mda_" + c);
    header.push_back("mda_overall");
    w.row(header);
    for (int f = 0; f < static_cast<int>(train_cluster.feature_names.size()); ++f) {
      std::vector<std::string> row = {train_cluster.feature_names[f]};
      for (std::size_t k = 0; k < class_names.size(); ++k)
        row.push_back(io::fmt_g(importance.class_mda_signed(f, static_cast<int>(k))));
      row.push_back(io::fmt_g(importance.overall_mda[f]));
      w.row(row);
    }
  }
  {
    const Eigen::VectorXd gini = forest::gini_importance(model_cluster);
    io::CsvWriter w(out_dir / "importance_gini.csv");
    w.row({"feature", "mean_gini_decrease"});
    for (int f = 0; f < static_cast<int>(train_cluster.feature_names.size()); ++f)
      w.row({train_cluster.feature_names[f], io::fmt_g(gini[f])});
  }

  json report;
  report["accuracy_cluster"] = cm_cluster.accuracy;
  report["accuracy_binary"] = cm_binary.accuracy;
  report["gap_points"] = 100.0 * (cm_cluster.accuracy - cm_binary.accuracy);
  report["n_clusters"] = n_clusters;
  report["n_train"] = train_rows.size();
  report["n_test"] = test_rows.size();
  report["classes"] = class_names;
  {
    std::ofstream out(out_dir / "classify_report.json");
    out << report.dump(2) << "\n";
  }
  scope.finish(std::move(report));
}

void cmd_eval(const PipelineConfig& cfg) {
  StageScope scope(cfg, "eval");
  require_stage(cfg, "segment", "eval");
  const DatasetManifest manifest = load_manifest_checked(cfg, "eval");

  const fs::path out_dir = cfg.run_dir / "eval";
  fs::remove_all(out_dir);
  fs::create_directories(out_dir);

  // Annotated test volumes, capped to the configured evaluation count.
  std::vector<const ManifestEntry*> test_entries;
  for (const auto& e : manifest.entries) {
    if (e.split != "test" || e.mask_path.empty()) continue;
    if (!is_preprocessed(cfg, e)) continue;
    if (static_cast<int>(test_entries.size()) >= cfg.eval_max_volumes) break;
    test_entries.push_back(&e);
  }
  if (test_entries.empty())
    throw PrerequisiteError("eval needs annotated volumes in the test split");

  json report;
  report["profile"] = cfg.profile;
  report["seed"] = cfg.seed;

  std::map<std::string, std::vector<double>> dice_by_embedder;

  io::CsvWriter table(out_dir / "metrics_table.csv");
  table.row(
      {"algorithm", "nu", "dice", "precision", "recall", "specificity", "accuracy"});

  for (const std::string& name : cfg.embedders) {
    double nu = 0;
    std::vector<double> dice, precision, recall, specificity, accuracy;
    json per_volume = json::object();

    for (const auto* entry : test_entries) {
      const std::string id = volume_id(*entry);
      const PreprocessedVolume vol = load_preprocessed(cfg, id, "eval");
      const fs::path seg = segment_dir(cfg, name, id);
      if (!fs::exists(seg / "embeddings.octm"))
        throw PrerequisiteError("eval needs segmentation outputs for '" + id + "' (" +
                                name + "); run `octa segment` first");
      {
        const io::ModelContainer c = io::ModelContainer::load(seg / "embeddings.octm");
        nu = c.attr_double("nu");
      }

      const AnnotationMask mask = io::load_mask(entry->mask_path);
      std::vector<std::vector<int>> shifts;
      for (const auto& s : vol.slices) shifts.push_back(s.shifts);
      const AnnotationMask flat = flatten_mask(mask, shifts);

      long long tp = 0, fp = 0, fn = 0, tn = 0;
      for (std::size_t s = 0; s < vol.slices.size(); ++s) {
        const auto pred =
            io::read_pgm(seg / ("mask_" + zero3(static_cast<int>(s)) + ".pgm"));
        const auto& labels = vol.slices[s].sp.labels;
        for (int r = 0; r < labels.height(); ++r) {
          for (int c = 0; c < labels.width(); ++c) {
            if (labels.at(r, c) < 0) continue;  // outside the retina
            const bool p = pred.pixels.at(r, c) != 0;
            const bool g = flat.slices[s].at(r, c) != 0;
            if (p && g)
              ++tp;
            else if (p)
              ++fp;
            else if (g)
              ++fn;
            else
              ++tn;
          }
        }
      }
      const eval::SegMetrics m = eval::seg_metrics_from_counts(tp, fp, fn, tn);
      dice.push_back(m.dice);
      precision.push_back(m.precision);
      recall.push_back(m.recall);
      specificity.push_back(m.specificity);
      accuracy.push_back(m.accuracy);
      per_volume[id] = {{"dice", m.dice},
                        {"precision", m.precision},
                        {"recall", m.recall},
                        {"specificity", m.specificity},
                        {"accuracy", m.accuracy}};
    }

    const auto pack = [](const std::vector<double>& v) {
      const eval::MeanStd ms = eval::mean_std(v);
      return json{{"mean", ms.mean}, {"std", ms.stddev}};
    };
    report["embedders"][name] = {{"nu", nu},
                                 {"n_volumes", test_entries.size()},
                                 {"dice", pack(dice)},
                                 {"precision", pack(precision)},
                                 {"recall", pack(recall)},
                                 {"specificity", pack(specificity)},
                                 {"accuracy", pack(accuracy)},
                                 {"per_volume", std::move(per_volume)}};
    dice_by_embedder[name] = dice;

    const auto cell = [](const std::vector<double>& v) {
      const eval::MeanStd ms = eval::mean_std(v);
      char buf[48];
      std::snprintf(buf, sizeof(buf), "%.2f (%.2f)", ms.mean, ms.stddev);
      return std::string(buf);
    };
    table.row({name, io::fmt_g(nu), cell(dice), cell(precision), cell(recall),
               cell(specificity), cell(accuracy)});

    // Validation trade-off curve for this embedding.
    const fs::path sweep_csv = cfg.run_dir / "svm" / ("sweep_" + name + ".csv");
    if (fs::exists(sweep_csv)) {
      io::CsvWriter pr(out_dir / ("pr_curve_" + name + ".csv"));
      pr.row({"nu", "recall", "precision"});
      for (const auto& row : io::read_csv(sweep_csv)) {
        if (row[0] == "nu") continue;
        pr.row({row[0], row[2], row[1]});
      }
    }
  }

  // Paired test between the first two embeddings' per-volume dice.
  if (cfg.embedders.size() >= 2) {
    const auto& a = dice_by_embedder[cfg.embedders[0]];
    const auto& b = dice_by_embedder[cfg.embedders[1]];
    json w;
    w["embedders"] = {cfg.embedders[0], cfg.embedders[1]};
    try {
      w["p_value"] = eval::wilcoxon_signed_rank(a, b);
    } catch (const Error& e) {
      w["p_value"] = nullptr;
      w["note"] = e.what();
    }
    report["wilcoxon_dice"] = std::move(w);
  }

  const fs::path classify_report = cfg.run_dir / "classify" / "classify_report.json";
  if (fs::exists(classify_report)) {
    std::ifstream in(classify_report);
    json c;
    in >> c;
    report["classification"] = std::move(c);
  }

  {
    std::ofstream out(out_dir / "report.json");
    out << report.dump(2) << "\n";
  }
  scope.finish();
}

void run_stage(const std::string& stage, const PipelineConfig& cfg) {
  if (stage == "synth") return cmd_synth(cfg);
  if (stage == "preprocess") return cmd_preprocess(cfg);
  if (stage == "train-features") return cmd_train_features(cfg);
  if (stage == "fit-svm") return cmd_fit_svm(cfg);
  if (stage == "segment") return cmd_segment(cfg);
  if (stage == "categorize") return cmd_categorize(cfg);
  if (stage == "classify") return cmd_classify(cfg);
  if (stage == "eval") return cmd_eval(cfg);
  throw ValueError("unknown stage '" + stage + "'");
}

void run_all(const PipelineConfig& cfg) {
  for (const auto& stage : kStageOrder) {
    const auto it = cfg.stages.find(stage);
    if (it != cfg.stages.end() && !it->second) continue;
    run_stage(stage, cfg);
  }
}

}  // namespace octa::pipe
