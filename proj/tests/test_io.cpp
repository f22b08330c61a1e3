#include <doctest.h>

#include <fstream>

#include "octa/io.hpp"
#include "octa/model_io.hpp"
#include "octa/pgm.hpp"
#include "octa/rng.hpp"
#include "octa/sidecar.hpp"
#include "test_util.hpp"

using namespace octa;

namespace {

OctVolume random_volume(std::uint64_t seed, int n_slices, int w, int h, int maxval) {
  Rng rng(seed);
  OctVolume vol;
  vol.id = "vol_" + std::to_string(seed);
  vol.spacing_um = {11.0, 4.0, 120.0};
  for (int s = 0; s < n_slices; ++s) {
    BScan b;
    b.maxval = maxval;
    b.pixels = Image<std::uint16_t>(w, h);
    for (auto& px : b.pixels.data())
      px = static_cast<std::uint16_t>(rng.uniform_int(maxval + 1));
    vol.bscans.push_back(std::move(b));
  }
  return vol;
}

}  // namespace

TEST_CASE("volume round trip preserves pixels exactly") {
  TempDir tmp;
  for (const int maxval : {255, 65535}) {
    const OctVolume vol = random_volume(11 + maxval, 3, 40, 28, maxval);
    const auto dir = tmp.path / ("vol_" + std::to_string(maxval));
    io::save_volume(vol, dir);
    const OctVolume loaded = io::load_volume(dir);
    CHECK(loaded.id == vol.id);
    CHECK(loaded.n_slices() == vol.n_slices());
    CHECK(loaded.spacing_um == vol.spacing_um);
    for (int s = 0; s < vol.n_slices(); ++s) {
      CHECK(loaded.bscans[s].maxval == vol.bscans[s].maxval);
      CHECK(loaded.bscans[s].pixels == vol.bscans[s].pixels);
    }
  }
}

TEST_CASE("identical PGMs load as a volume") {
  TempDir tmp;
  Image<std::uint16_t> img(64, 64, 7);
  for (int i = 0; i < 3; ++i)
    io::write_pgm(tmp.path / ("bscan_00" + std::to_string(i) + ".pgm"), img, 255);
  io::write_sidecar(tmp.path / "meta.txt", {{"id", "three"},
                                            {"spacing_x_um", "11"},
                                            {"spacing_y_um", "4"},
                                            {"spacing_z_um", "120"}});
  const OctVolume vol = io::load_volume(tmp.path);
  CHECK(vol.n_slices() == 3);
  CHECK(vol.width() == 64);
  CHECK(vol.height() == 64);
}

TEST_CASE("mixed B-scan sizes are a shape error") {
  TempDir tmp;
  io::write_pgm(tmp.path / "bscan_000.pgm", Image<std::uint16_t>(32, 32, 0), 255);
  io::write_pgm(tmp.path / "bscan_001.pgm", Image<std::uint16_t>(48, 32, 0), 255);
  io::write_sidecar(tmp.path / "meta.txt", {{"id", "bad"},
                                            {"spacing_x_um", "11"},
                                            {"spacing_y_um", "4"},
                                            {"spacing_z_um", "120"}});
  CHECK_THROWS_AS(io::load_volume(tmp.path), ShapeError);
}

TEST_CASE("missing sidecar is a format error") {
  TempDir tmp;
  io::write_pgm(tmp.path / "bscan_000.pgm", Image<std::uint16_t>(32, 32, 0), 255);
  CHECK_THROWS_AS(io::load_volume(tmp.path), FormatError);
}

TEST_CASE("slice order follows the numeric index, not write order") {
  TempDir tmp;
  // Written out of order on purpose.
  for (const int idx : {2, 0, 1}) {
    Image<std::uint16_t> img(8, 8, static_cast<std::uint16_t>(idx * 10));
    io::write_pgm(tmp.path / ("bscan_00" + std::to_string(idx) + ".pgm"), img, 255);
  }
  io::write_sidecar(tmp.path / "meta.txt", {{"id", "ordered"},
                                            {"spacing_x_um", "11"},
                                            {"spacing_y_um", "4"},
                                            {"spacing_z_um", "120"}});
  const OctVolume vol = io::load_volume(tmp.path);
  for (int s = 0; s < 3; ++s) CHECK(vol.bscans[s].pixels.at(0, 0) == s * 10);
}

TEST_CASE("mask round trip preserves the label histogram") {
  TempDir tmp;
  Rng rng(202);
  AnnotationMask mask;
  mask.legend = {{0, "normal"}, {1, "anomaly"}, {2, "other"}};
  std::vector<long> histogram(3, 0);
  for (int s = 0; s < 2; ++s) {
    Image<std::uint16_t> slice(20, 16);
    for (auto& v : slice.data()) {
      v = static_cast<std::uint16_t>(rng.uniform_int(3));
      ++histogram[v];
    }
    mask.slices.push_back(std::move(slice));
  }
  io::save_mask(mask, tmp.path / "mask");
  const AnnotationMask loaded = io::load_mask(tmp.path / "mask");
  CHECK(loaded.legend == mask.legend);
  std::vector<long> loaded_histogram(3, 0);
  for (const auto& slice : loaded.slices)
    for (const auto v : slice.data()) ++loaded_histogram[v];
  CHECK(loaded_histogram == histogram);
}

TEST_CASE("all-zero mask stays all zero") {
  TempDir tmp;
  AnnotationMask mask;
  mask.slices.emplace_back(12, 10, 0);
  mask.legend = {{0, "normal"}};
  io::save_mask(mask, tmp.path / "mask");
  const AnnotationMask loaded = io::load_mask(tmp.path / "mask");
  for (const auto v : loaded.slices[0].data()) CHECK(v == 0);
}

TEST_CASE("mask label capacity and legend validation") {
  TempDir tmp;
  AnnotationMask wide;
  wide.slices.emplace_back(4, 4, 300);  // exceeds 8 bits
  CHECK_THROWS_AS(io::save_mask(wide, tmp.path / "m1"), ValueError);

  AnnotationMask dup;
  dup.slices.emplace_back(4, 4, 0);
  dup.legend = {{0, "same"}, {1, "same"}};
  CHECK_THROWS_AS(io::save_mask(dup, tmp.path / "m2"), ValueError);
}

TEST_CASE("model container rejects bad magic, version and truncation") {
  TempDir tmp;
  const auto path = tmp.path / "model.octm";
  io::ModelContainer c;
  c.kind = "ocsvm";
  c.attrs["nu"] = "0.1";
  c.matrices["w"] = Eigen::MatrixXf::Random(16, 1);
  c.save(path);

  // Wrong magic.
  {
    std::ofstream out(tmp.path / "bad.octm", std::ios::binary);
    out << "NOPE1234";
  }
  CHECK_THROWS_AS(io::ModelContainer::load(tmp.path / "bad.octm"), FormatError);

  // Truncated payload.
  {
    std::ifstream in(path, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
    std::ofstream out(tmp.path / "cut.octm", std::ios::binary);
    out.write(all.data(), static_cast<std::streamsize>(all.size() - 9));
  }
  CHECK_THROWS_AS(io::ModelContainer::load(tmp.path / "cut.octm"), FormatError);

  // Version mismatch.
  {
    std::ifstream in(path, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
    all[4] = 99;
    std::ofstream out(tmp.path / "ver.octm", std::ios::binary);
    out.write(all.data(), static_cast<std::streamsize>(all.size()));
  }
  CHECK_THROWS_AS(io::ModelContainer::load(tmp.path / "ver.octm"), FormatError);

  const io::ModelContainer loaded = io::ModelContainer::load(path);
  CHECK(loaded.kind == "ocsvm");
  CHECK(loaded.attr("nu") == "0.1");
  CHECK(loaded.matrix("w") == c.matrices["w"]);
}

TEST_CASE("ocsvm model round trip keeps decisions within f32 tolerance") {
  TempDir tmp;
  Rng rng(17);
  svm::OcsvmModel model;
  const int d = 24;
  model.w.resize(d);
  model.scale_shift.resize(d);
  model.scale_inv.resize(d);
  for (int i = 0; i < d; ++i) {
    model.w[i] = static_cast<float>(rng.normal());
    model.scale_shift[i] = static_cast<float>(rng.normal());
    model.scale_inv[i] = static_cast<float>(0.5 + rng.uniform());
  }
  model.rho = 0.37f;
  model.nu = 0.1f;

  const auto path = tmp.path / "ocsvm.octm";
  io::save_model(model, path);
  const auto loaded = io::load_model_as<svm::OcsvmModel>(path);

  for (int t = 0; t < 50; ++t) {
    Eigen::VectorXf z(d);
    for (int i = 0; i < d; ++i) z[i] = static_cast<float>(rng.normal());
    CHECK(std::abs(loaded.decision(z) - model.decision(z)) <= 1e-6f);
    CHECK(loaded.classify(z) == model.classify(z));
  }
}

TEST_CASE("manifest round trip with relative paths") {
  TempDir tmp;
  DatasetManifest manifest;
  manifest.entries.push_back(
      {(tmp.path / "data" / "v0").string(), "healthy", "", "train"});
  manifest.entries.push_back({(tmp.path / "data" / "v1").string(), "late",
                              (tmp.path / "data" / "v1_mask").string(), "test"});
  const auto csv = tmp.path / "manifest.csv";
  io::save_manifest(manifest, csv);
  const DatasetManifest loaded = io::load_manifest(csv);
  REQUIRE(loaded.entries.size() == 2);
  CHECK(loaded.entries[0].volume_path == manifest.entries[0].volume_path);
  CHECK(loaded.entries[0].mask_path.empty());
  CHECK(loaded.entries[1].mask_path == manifest.entries[1].mask_path);
  CHECK(loaded.entries[1].split == "test");

  DatasetManifest bad;
  bad.entries.push_back({"x", "healthy", "", "not_a_split"});
  CHECK_THROWS_AS(io::save_manifest(bad, tmp.path / "bad.csv"), ValueError);
}
