#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "octa/errors.hpp"
#include "octa/eval.hpp"
#include "octa/model_container.hpp"

namespace octa::svm {

/// Linear nu-one-class SVM. Training standardizes features per dimension and
/// the scaling travels with the model, so classify() accepts raw embeddings.
/// decision(z) = w . standardize(z) - rho; anomalous iff decision < 0, a tie
/// at exactly 0 counts as normal.
struct OcsvmModel {
  Eigen::VectorXf w;
  float rho = 0;
  float nu = 0;
  Eigen::VectorXf scale_shift;  // per-dimension mean of the training set
  Eigen::VectorXf scale_inv;    // 1 / std (1 where the std is zero)
  long iterations = 0;
  float kkt_violation = 0;

  float decision(const Eigen::VectorXf& z) const {
    if (z.size() != w.size()) throw ShapeError("embedding width mismatch");
    return ((z - scale_shift).cwiseProduct(scale_inv)).dot(w) - rho;
  }
  Eigen::VectorXf decision_batch(const Eigen::MatrixXf& Z) const {
    if (Z.cols() != w.size()) throw ShapeError("embedding width mismatch");
    Eigen::MatrixXf scaled = Z;
    scaled.rowwise() -= scale_shift.transpose();
    return (scaled * scale_inv.asDiagonal() * w).array() - rho;
  }
  /// 1 = anomaly, 0 = normal.
  int classify(const Eigen::VectorXf& z) const { return decision(z) < 0.0f ? 1 : 0; }
};

struct FitOptions {
  double tol = 1e-4;                    // max KKT violation at convergence
  long max_pair_updates = 1'000'000;    // SMO iteration cap
  long subsample_threshold = 300'000;   // fit on a subsample beyond this
  long subsample_size = 100'000;
  std::uint64_t seed = 0x0c5a;          // subsampling stream
};

/// Final dual variables and objective, for feasibility checks.
struct FitDiagnostics {
  Eigen::VectorXd alpha;
  double upper_bound = 0;  // 1 / (nu * N)
  double objective = 0;    // 0.5 * ||w||^2 in the scaled space
};

/// Solves the nu-one-class dual
///   min 0.5 ||sum_i alpha_i z_i||^2   s.t. 0 <= alpha_i <= 1/(nu N), sum alpha = 1
/// by pairwise (SMO-style) updates with max-violating-pair selection.
OcsvmModel fit(const Eigen::MatrixXf& Z, double nu, const FitOptions& options = {},
               FitDiagnostics* diagnostics = nullptr);

/// Superpixel-level view of an annotated volume: one embedding row per
/// superpixel plus its pixel count and how many of those pixels are
/// annotated anomalous. Enough to score a segmentation at pixel level.
struct ValidationVolume {
  Eigen::MatrixXf embeddings;
  std::vector<long long> anomalous_pixels;  // per superpixel
  std::vector<long long> total_pixels;
};

struct SweepPoint {
  double nu = 0;
  bool ok = false;
  std::string error;
  eval::SegMetrics mean;  // per-volume metrics averaged over volumes
};

struct SweepResult {
  std::vector<SweepPoint> points;
  int best_index = -1;  // highest mean validation dice among the fits that converged
  OcsvmModel best_model;
};

inline std::vector<double> default_nu_grid() {
  return {0.01, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
}

/// Fits one model per grid value, scores each on the validation volumes at
/// pixel level, and picks the nu with the highest mean dice. Failed grid
/// points are recorded and skipped.
SweepResult sweep_nu(const Eigen::MatrixXf& Ztrain,
                     const std::vector<ValidationVolume>& validation,
                     std::span<const double> grid, const FitOptions& options = {});

/// Pixel-level counts of one classified volume against its annotation.
eval::SegMetrics score_volume(const OcsvmModel& model, const ValidationVolume& volume);

io::ModelContainer to_container(const OcsvmModel& m);
OcsvmModel ocsvm_from_container(const io::ModelContainer& c);

}  // namespace octa::svm
