// Python bindings for the octa core: the main operations of each stage plus
// a driver for the full pipeline.

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "octa/cluster.hpp"
#include "octa/eval.hpp"
#include "octa/features.hpp"
#include "octa/forest.hpp"
#include "octa/io.hpp"
#include "octa/model_io.hpp"
#include "octa/neuralnet.hpp"
#include "octa/ocsvm.hpp"
#include "octa/pipeline.hpp"
#include "octa/preprocess.hpp"
#include "octa/synth.hpp"

namespace py = pybind11;
using namespace octa;

namespace {

Image<std::uint16_t> image_from_array(const py::array_t<std::uint16_t>& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-d array");
  Image<std::uint16_t> img(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  auto r = a.unchecked<2>();
  for (py::ssize_t row = 0; row < a.shape(0); ++row)
    for (py::ssize_t col = 0; col < a.shape(1); ++col)
      img.at(static_cast<int>(row), static_cast<int>(col)) = r(row, col);
  return img;
}

py::array_t<std::uint16_t> image_to_array(const Image<std::uint16_t>& img) {
  py::array_t<std::uint16_t> out({img.height(), img.width()});
  auto w = out.mutable_unchecked<2>();
  for (int row = 0; row < img.height(); ++row)
    for (int col = 0; col < img.width(); ++col) w(row, col) = img.at(row, col);
  return out;
}

NormalizedBScan normalized_from_array(const py::array_t<float>& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-d array");
  NormalizedBScan n;
  n.pixels = Image<float>(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  auto r = a.unchecked<2>();
  for (py::ssize_t row = 0; row < a.shape(0); ++row)
    for (py::ssize_t col = 0; col < a.shape(1); ++col)
      n.pixels.at(static_cast<int>(row), static_cast<int>(col)) = r(row, col);
  return n;
}

BScan bscan_from_array(const py::array_t<std::uint16_t>& a, int maxval) {
  BScan b;
  b.pixels = image_from_array(a);
  b.maxval = maxval;
  return b;
}

nn::TrainConfig train_config_from_kwargs(const py::dict& kw) {
  nn::TrainConfig cfg;
  if (kw.contains("lr_schedule")) {
    cfg.lr_schedule.clear();
    for (const auto& item : kw["lr_schedule"].cast<py::list>()) {
      const auto pair = item.cast<py::tuple>();
      cfg.lr_schedule.push_back({pair[0].cast<int>(), pair[1].cast<double>()});
    }
  }
  if (kw.contains("minibatch")) cfg.minibatch = kw["minibatch"].cast<int>();
  if (kw.contains("momentum")) cfg.momentum = kw["momentum"].cast<double>();
  if (kw.contains("corruption")) cfg.corruption = kw["corruption"].cast<double>();
  if (kw.contains("seed")) cfg.seed = kw["seed"].cast<std::uint64_t>();
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Anomaly detection and categorization for layered-volume scans";

  py::register_exception<PrerequisiteError>(m, "PrerequisiteError");
  py::register_exception<Error>(m, "OctaError");

  // --- neural net -----------------------------------------------------
  m.def("elu", &nn::elu, py::arg("x"), py::arg("alpha") = 1.0);
  m.def(
      "corrupt",
      [](const Eigen::MatrixXf& batch, double fraction, std::uint64_t seed) {
        Rng rng(seed);
        return nn::corrupt(batch, fraction, rng);
      },
      py::arg("batch"), py::arg("fraction"), py::arg("seed") = 0);

  py::class_<nn::DenseStack<float>>(m, "DdaeStack")
      .def_property_readonly("input_dim", &nn::DenseStack<float>::input_dim)
      .def_property_readonly("code_dim", &nn::DenseStack<float>::code_dim)
      .def("encode", &nn::DenseStack<float>::encode, py::arg("batch"))
      .def("reconstruct", &nn::DenseStack<float>::reconstruct, py::arg("batch"));

  m.def(
      "train_ddae",
      [](const Eigen::MatrixXf& patches, const std::vector<int>& hidden_dims,
         const py::kwargs& kw) {
        const nn::TrainConfig cfg = train_config_from_kwargs(kw);
        auto result = nn::train_ddae(patches, hidden_dims, cfg);
        std::vector<std::tuple<int, double, double>> trace;
        for (const auto& e : result.trace)
          trace.emplace_back(e.epoch, e.mean_loss, e.lr);
        return py::make_tuple(std::move(result.model), std::move(trace));
      },
      py::arg("patches"), py::arg("hidden_dims"),
      "Returns (model, [(epoch, mean_loss, lr), ...]).");

  m.def(
      "gradient_check",
      [](const Eigen::MatrixXd& X, const std::vector<int>& hidden_dims,
         std::uint64_t seed, double eps) {
        const auto model = nn::make_stack<double>(
            static_cast<int>(X.cols()), hidden_dims, 0.5, seed);
        return nn::gradient_check(model, X, eps);
      },
      py::arg("batch"), py::arg("hidden_dims"), py::arg("seed") = 0,
      py::arg("eps") = 1e-5);

  // --- preprocessing / features ---------------------------------------
  m.def(
      "find_surfaces",
      [](const py::array_t<std::uint16_t>& bscan, int maxval) {
        const LayerSurfaces s = prep::find_surfaces(bscan_from_array(bscan, maxval));
        return py::make_tuple(s.ilm, s.bm);
      },
      py::arg("bscan"), py::arg("maxval") = 255,
      "Returns (ilm_rows, bm_rows) per column.");

  m.def(
      "normalize",
      [](const py::array_t<std::uint16_t>& bscan, int maxval) {
        const NormalizedBScan n = prep::normalize(bscan_from_array(bscan, maxval));
        py::array_t<float> out({n.height(), n.width()});
        auto w = out.mutable_unchecked<2>();
        for (int r = 0; r < n.height(); ++r)
          for (int c = 0; c < n.width(); ++c) w(r, c) = n.pixels.at(r, c);
        return out;
      },
      py::arg("bscan"), py::arg("maxval") = 255);

  m.def(
      "extract_patch_pair",
      [](const py::array_t<float>& normalized, int row, int col) {
        const feat::PatchPair p =
            feat::extract_patch_pair(normalized_from_array(normalized), row, col);
        return py::make_tuple(p.small, p.large_ds);
      },
      py::arg("normalized"), py::arg("row"), py::arg("col"),
      "Returns the flattened (small, large_downsampled) 32x32 patch pair.");

  // --- one-class SVM ----------------------------------------------------
  py::class_<svm::OcsvmModel>(m, "OcsvmModel")
      .def_readonly("nu", &svm::OcsvmModel::nu)
      .def_readonly("rho", &svm::OcsvmModel::rho)
      .def_readonly("iterations", &svm::OcsvmModel::iterations)
      .def("decision", &svm::OcsvmModel::decision, py::arg("z"))
      .def("decision_batch", &svm::OcsvmModel::decision_batch, py::arg("Z"))
      .def("classify", &svm::OcsvmModel::classify, py::arg("z"));

  m.def(
      "ocsvm_fit",
      [](const Eigen::MatrixXf& Z, double nu) { return svm::fit(Z, nu); },
      py::arg("Z"), py::arg("nu"));

  // --- clustering -------------------------------------------------------
  py::class_<cluster::ClusterModel>(m, "ClusterModel")
      .def_property_readonly("n_clusters", &cluster::ClusterModel::n_clusters)
      .def_readonly("objective", &cluster::ClusterModel::objective)
      .def_property_readonly(
          "centroids",
          [](const cluster::ClusterModel& m) { return m.centroids; })
      .def("assign",
           [](const cluster::ClusterModel& m, const Eigen::VectorXf& z) {
             return m.assign(z);
           },
           py::arg("z"))
      .def("assign_batch", &cluster::ClusterModel::assign_batch, py::arg("Z"));

  m.def("shift_nonnegative", [](const Eigen::MatrixXf& Z) {
    auto [shifted, shift] = cluster::shift_nonnegative(Z);
    return py::make_tuple(std::move(shifted), std::move(shift));
  });
  m.def(
      "fit_spherical_kmeans",
      [](const Eigen::MatrixXf& Z, int n_clusters, std::uint64_t seed, int restarts) {
        cluster::FitOptions options;
        options.restarts = restarts;
        return cluster::fit_spherical_kmeans(Z, n_clusters, seed, options);
      },
      py::arg("Z"), py::arg("n_clusters"), py::arg("seed") = 0,
      py::arg("restarts") = 10);
  m.def("db_index", &cluster::db_index, py::arg("model"), py::arg("Z"));
  m.def(
      "select_n_clusters",
      [](const Eigen::MatrixXf& Z, int c_min, int c_max, std::uint64_t seed) {
        const cluster::SelectionResult r = cluster::select_C(Z, c_min, c_max, seed);
        return py::make_tuple(r.best, r.curve);
      },
      py::arg("Z"), py::arg("c_min") = 2, py::arg("c_max") = 30,
      py::arg("seed") = 0, "Returns (best_model, [(C, db_index), ...]).");
  m.def("centroid_correspondence", &cluster::centroid_correspondence,
        py::arg("model_a"), py::arg("model_b"));

  // --- random forest ------------------------------------------------------
  py::class_<forest::ForestModel>(m, "ForestModel")
      .def_property_readonly("n_trees", &forest::ForestModel::n_trees)
      .def_readonly("class_names", &forest::ForestModel::class_names)
      .def_readonly("feature_names", &forest::ForestModel::feature_names);

  m.def(
      "fit_forest",
      [](const Eigen::MatrixXf& X, const std::vector<int>& y,
         const std::vector<std::string>& class_names,
         const std::vector<std::string>& feature_names, int n_trees,
         std::uint64_t seed) {
        forest::FeatureTable t;
        t.X = X;
        t.y = y;
        t.class_names = class_names;
        t.feature_names = feature_names;
        return forest::fit_forest(t, n_trees, seed);
      },
      py::arg("X"), py::arg("y"), py::arg("class_names"), py::arg("feature_names"),
      py::arg("n_trees") = 64, py::arg("seed") = 0);
  m.def(
      "forest_predict",
      [](const forest::ForestModel& model, const Eigen::VectorXf& row) {
        const forest::Prediction p = forest::predict(model, row);
        return py::make_tuple(p.cls, p.votes);
      },
      py::arg("model"), py::arg("row"), "Returns (class_index, vote_fractions).");
  m.def(
      "permutation_importance",
      [](const forest::ForestModel& model, const Eigen::MatrixXf& X,
         const std::vector<int>& y) {
        forest::FeatureTable t;
        t.X = X;
        t.y = y;
        t.class_names = model.class_names;
        t.feature_names = model.feature_names;
        const forest::ImportanceReport r = forest::permutation_importance(model, t);
        return py::make_tuple(r.overall_mda, r.class_mda_signed);
      },
      py::arg("model"), py::arg("X"), py::arg("y"),
      "Returns (overall_mda, signed_per_class_mda).");
  m.def("gini_importance", &forest::gini_importance, py::arg("model"));
  m.def(
      "cluster_volume_features",
      [](const std::vector<int>& sp_cluster, const std::vector<long long>& sp_pixels,
         int n_clusters, const std::array<double, 3>& spacing_um, bool binary) {
        return forest::cluster_volume_features(sp_cluster, sp_pixels, n_clusters,
                                               spacing_um, binary);
      },
      py::arg("sp_cluster"), py::arg("sp_pixels"), py::arg("n_clusters"),
      py::arg("spacing_um"), py::arg("binary") = false);

  // --- metrics -------------------------------------------------------------
  m.def("seg_metrics_from_counts", [](long long tp, long long fp, long long fn,
                                      long long tn) {
    const eval::SegMetrics s = eval::seg_metrics_from_counts(tp, fp, fn, tn);
    py::dict d;
    d["dice"] = s.dice;
    d["precision"] = s.precision;
    d["recall"] = s.recall;
    d["specificity"] = s.specificity;
    d["accuracy"] = s.accuracy;
    return d;
  });
  m.def(
      "roc_auc",
      [](const std::vector<double>& scores, const std::vector<int>& labels) {
        return eval::roc_auc(scores, labels);
      },
      py::arg("scores"), py::arg("labels"));
  m.def(
      "wilcoxon_signed_rank",
      [](const std::vector<double>& a, const std::vector<double>& b) {
        return eval::wilcoxon_signed_rank(a, b);
      },
      py::arg("a"), py::arg("b"));

  // --- phantoms and volumes --------------------------------------------
  m.def(
      "generate_phantom",
      [](const std::string& label, std::uint64_t seed, int width, int height,
         int bscans, double speckle_sigma) {
        synth::PhantomConfig cfg;
        cfg.label = label;
        cfg.seed = seed;
        cfg.width = width;
        cfg.height = height;
        cfg.n_bscans = bscans;
        cfg.speckle_sigma = speckle_sigma;
        cfg.recipes = synth::recipes_for_label(label);
        const synth::Phantom p = synth::generate_volume(cfg);
        py::list slices, masks, ilm, bm;
        for (int s = 0; s < p.volume.n_slices(); ++s) {
          slices.append(image_to_array(p.volume.bscans[s].pixels));
          masks.append(image_to_array(p.mask.slices[s]));
          ilm.append(p.surfaces[s].ilm);
          bm.append(p.surfaces[s].bm);
        }
        py::dict out;
        out["bscans"] = slices;
        out["mask"] = masks;
        out["ilm"] = ilm;
        out["bm"] = bm;
        out["label"] = p.label;
        return out;
      },
      py::arg("label") = "healthy", py::arg("seed") = 1, py::arg("width") = 128,
      py::arg("height") = 128, py::arg("bscans") = 4,
      py::arg("speckle_sigma") = 0.16);

  m.def(
      "load_volume",
      [](const std::filesystem::path& dir) {
        const OctVolume v = io::load_volume(dir);
        py::list slices;
        for (const auto& b : v.bscans) slices.append(image_to_array(b.pixels));
        py::dict out;
        out["id"] = v.id;
        out["spacing_um"] = v.spacing_um;
        out["bscans"] = slices;
        return out;
      },
      py::arg("path"));

  // --- pipeline ------------------------------------------------------------
  m.def(
      "run_stage",
      [](const std::string& stage, const std::filesystem::path& config,
         std::optional<std::uint64_t> seed, std::optional<std::string> profile) {
        const auto cfg = pipe::PipelineConfig::from_file(config, seed, profile);
        if (stage == "run")
          pipe::run_all(cfg);
        else
          pipe::run_stage(stage, cfg);
      },
      py::arg("stage"), py::arg("config"), py::arg("seed") = py::none(),
      py::arg("profile") = py::none(),
      "Runs one pipeline stage (or 'run' for all toggled stages).");

  m.attr("STAGES") = pipe::kStageOrder;
  m.attr("__version__") = "0.1.0";
}
