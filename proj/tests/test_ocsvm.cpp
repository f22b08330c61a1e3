#include <doctest.h>

#include <cmath>

#include "octa/ocsvm.hpp"
#include "octa/rng.hpp"

using namespace octa;

namespace {

Eigen::MatrixXf gaussian_embeddings(int n, int d, std::uint64_t seed,
                                    double spread = 1.0) {
  Rng rng(seed);
  Eigen::MatrixXf Z(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      Z(i, j) = static_cast<float>(0.5 * j + spread * rng.normal());
  return Z;
}

double anomalous_fraction(const svm::OcsvmModel& model, const Eigen::MatrixXf& Z) {
  const Eigen::VectorXf decisions = model.decision_batch(Z);
  long outside = 0;
  for (Eigen::Index i = 0; i < decisions.size(); ++i) outside += decisions[i] < 0.0f;
  return static_cast<double>(outside) / static_cast<double>(Z.rows());
}

}  // namespace

TEST_CASE("nu property holds on Gaussian embeddings") {
  const int n = 2000;
  const Eigen::MatrixXf Z = gaussian_embeddings(n, 16, 31);
  for (const double nu : {0.1, 0.3, 0.5}) {
    const svm::OcsvmModel model = svm::fit(Z, nu);
    const double fraction = anomalous_fraction(model, Z);
    const double delta = std::max(0.02, 3.0 * std::sqrt(nu * (1.0 - nu) / n));
    CHECK(std::abs(fraction - nu) <= delta);
  }
}

TEST_CASE("dual feasibility at convergence") {
  const Eigen::MatrixXf Z = gaussian_embeddings(500, 8, 7);
  for (const double nu : {0.1, 0.5, 0.9}) {
    svm::FitDiagnostics diag;
    svm::fit(Z, nu, {}, &diag);
    CHECK(std::abs(diag.alpha.sum() - 1.0) <= 1e-8);
    for (Eigen::Index i = 0; i < diag.alpha.size(); ++i) {
      CHECK(diag.alpha[i] >= -1e-12);
      CHECK(diag.alpha[i] <= diag.upper_bound + 1e-12);
    }
  }
}

TEST_CASE("duplicating the data leaves the boundary unchanged") {
  const Eigen::MatrixXf Z = gaussian_embeddings(300, 6, 13);
  Eigen::MatrixXf doubled(600, 6);
  doubled << Z, Z;
  const svm::OcsvmModel a = svm::fit(Z, 0.2);
  const svm::OcsvmModel b = svm::fit(doubled, 0.2);
  const Eigen::VectorXf wa = a.w / a.w.norm();
  const Eigen::VectorXf wb = b.w / b.w.norm();
  CHECK((wa - wb).cwiseAbs().maxCoeff() <= 1e-4f);
  CHECK(a.rho / a.w.norm() == doctest::Approx(b.rho / b.w.norm()).epsilon(1e-3));
}

TEST_CASE("nu = 1 puts every training point on or outside the boundary") {
  const Eigen::MatrixXf Z = gaussian_embeddings(200, 5, 3);
  const svm::OcsvmModel model = svm::fit(Z, 1.0);
  const Eigen::VectorXf decisions = model.decision_batch(Z);
  for (Eigen::Index i = 0; i < decisions.size(); ++i)
    CHECK(decisions[i] <= 1e-6f);
}

TEST_CASE("boundary ties count as normal") {
  svm::OcsvmModel model;
  model.w = Eigen::VectorXf::Ones(4);
  model.scale_shift = Eigen::VectorXf::Zero(4);
  model.scale_inv = Eigen::VectorXf::Ones(4);
  model.rho = 4.0f;
  const Eigen::VectorXf on_margin = Eigen::VectorXf::Ones(4);  // decision exactly 0
  CHECK(model.decision(on_margin) == 0.0f);
  CHECK(model.classify(on_margin) == 0);
}

TEST_CASE("centroid is normal, far outliers along w are anomalous") {
  const Eigen::MatrixXf Z = gaussian_embeddings(800, 8, 17);
  const svm::OcsvmModel model = svm::fit(Z, 0.1);

  const Eigen::VectorXf centroid = Z.colwise().mean();
  CHECK(model.classify(centroid) == 0);

  // March far against the decision direction.
  Eigen::VectorXf w_unit = model.w / model.w.norm();
  Eigen::VectorXf far_out = centroid - 100.0f * w_unit;
  CHECK(model.classify(far_out) == 1);
}

TEST_CASE("fit input validation") {
  const Eigen::MatrixXf Z = gaussian_embeddings(10, 4, 1);
  CHECK_THROWS_AS(svm::fit(Z, 0.0), ValueError);
  CHECK_THROWS_AS(svm::fit(Z, 1.5), ValueError);
  CHECK_THROWS_AS(svm::fit(Eigen::MatrixXf::Zero(1, 4), 0.5), ValueError);
}

TEST_CASE("subsampling keeps the fit usable") {
  const Eigen::MatrixXf Z = gaussian_embeddings(2000, 6, 23);
  svm::FitOptions options;
  options.subsample_threshold = 500;
  options.subsample_size = 500;
  const svm::OcsvmModel model = svm::fit(Z, 0.2, options);
  const double fraction = anomalous_fraction(model, Z);
  CHECK(std::abs(fraction - 0.2) <= 0.05);
}

namespace {

// Two-blob validation volume: normal cluster labeled 0, a shifted anomalous
// cluster labeled 1; one pixel per superpixel keeps the oracle simple.
svm::ValidationVolume blob_volume(const Eigen::MatrixXf& normal_like,
                                  std::uint64_t seed, int n_each, float offset) {
  Rng rng(seed);
  const auto d = static_cast<int>(normal_like.cols());
  svm::ValidationVolume v;
  v.embeddings.resize(2 * n_each, d);
  for (int i = 0; i < n_each; ++i) {
    for (int j = 0; j < d; ++j) {
      v.embeddings(i, j) = static_cast<float>(0.5 * j + rng.normal());
      v.embeddings(n_each + i, j) =
          static_cast<float>(0.5 * j + rng.normal() + offset);
    }
  }
  v.total_pixels.assign(2 * n_each, 1);
  v.anomalous_pixels.assign(2 * n_each, 0);
  for (int i = 0; i < n_each; ++i) v.anomalous_pixels[n_each + i] = 1;
  return v;
}

}  // namespace

TEST_CASE("nu sweep: recall rises and precision falls with nu") {
  const Eigen::MatrixXf Ztrain = gaussian_embeddings(1500, 8, 41);
  std::vector<svm::ValidationVolume> validation;
  for (int v = 0; v < 3; ++v)
    validation.push_back(blob_volume(Ztrain, 100 + v, 120, 4.0f));

  const auto grid = svm::default_nu_grid();
  const svm::SweepResult sweep = svm::sweep_nu(Ztrain, validation, grid);
  REQUIRE(sweep.points.size() == grid.size());

  int recall_inversions = 0, precision_inversions = 0;
  for (std::size_t i = 1; i < sweep.points.size(); ++i) {
    REQUIRE(sweep.points[i].ok);
    if (sweep.points[i].mean.recall < sweep.points[i - 1].mean.recall - 1e-9)
      ++recall_inversions;
    if (sweep.points[i].mean.precision > sweep.points[i - 1].mean.precision + 1e-9)
      ++precision_inversions;
  }
  CHECK(recall_inversions <= 1);
  CHECK(precision_inversions <= 1);

  CHECK(sweep.best_index >= 0);
  CHECK(sweep.points[sweep.best_index].mean.dice >= sweep.points.front().mean.dice);
  CHECK(sweep.points[sweep.best_index].mean.dice >= sweep.points.back().mean.dice);
}

TEST_CASE("sweep with a single grid point selects it") {
  const Eigen::MatrixXf Ztrain = gaussian_embeddings(400, 6, 5);
  std::vector<svm::ValidationVolume> validation = {blob_volume(Ztrain, 9, 60, 4.0f)};
  const std::vector<double> grid = {0.3};
  const svm::SweepResult sweep = svm::sweep_nu(Ztrain, validation, grid);
  CHECK(sweep.best_index == 0);
  CHECK(sweep.best_model.nu == 0.3f);
}
