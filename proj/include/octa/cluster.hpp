#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "octa/model_container.hpp"

namespace octa::cluster {

/// Spherical k-means model: unit-norm centroids over nonnegative-shifted
/// embeddings. The shift learned on the clustering training set travels with
/// the model so later assignments live in the same positive domain.
/// Centroids are kept in double precision; the on-disk container stores f32
/// and reloading re-normalizes the rows.
struct ClusterModel {
  Eigen::MatrixXd centroids;  // C x dim, unit rows
  Eigen::VectorXd shift;      // per-dimension offset subtracted before normalizing
  double objective = 0;       // sum of (1 - cos) at convergence

  int n_clusters() const { return static_cast<int>(centroids.rows()); }
  int dim() const { return static_cast<int>(centroids.cols()); }

  /// Nearest centroid (max cosine) of a raw embedding, after applying the
  /// stored shift; ties break toward the smallest index. An embedding that is
  /// all-zero after the shift cannot be normalized and falls back on cluster
  /// 0 (flagged via *degenerate).
  int assign(const Eigen::VectorXf& z, bool* degenerate = nullptr) const;
  std::vector<int> assign_batch(const Eigen::MatrixXf& Z) const;
};

/// Column-minimum shift into the nonnegative domain: Z'(i,j) = Z(i,j) - min_i Z(i,j).
/// Returns the shifted matrix and the offsets (to be stored in the model).
std::pair<Eigen::MatrixXf, Eigen::VectorXf> shift_nonnegative(const Eigen::MatrixXf& Z);

struct FitOptions {
  int restarts = 10;
  int max_iters = 100;
};

/// Per-restart objective trajectory, for monotonicity checks.
struct FitTrace {
  std::vector<std::vector<double>> objective_per_iter;
};

/// Alternating assignment / normalized-mean updates with k-means++-style
/// seeding under cosine distance; keeps the best of `restarts` runs. Empty
/// clusters are re-seeded from the point farthest from its centroid.
/// Z must already be shifted nonnegative (the returned model carries a zero
/// shift; callers overwrite it with the offsets from shift_nonnegative).
/// Rows with zero norm are ignored during fitting.
ClusterModel fit_spherical_kmeans(const Eigen::MatrixXf& Z, int n_clusters,
                                  std::uint64_t seed, const FitOptions& options = {},
                                  FitTrace* trace = nullptr);

/// Davies-Bouldin index of the model on data in fit-time (already shifted)
/// coordinates, all distances cosine:
///   DB = mean_i max_{j != i} (S_i + S_j) / M_ij
/// with S the mean member-to-centroid distance and M the centroid distance.
/// Coincident centroids (M = 0) yield +infinity. Every cluster must own at
/// least one member of Z.
double db_index(const ClusterModel& model, const Eigen::MatrixXf& Z);

struct SelectionResult {
  ClusterModel best;
  std::vector<std::pair<int, double>> curve;  // (C, DB index)
};

/// Fits every cluster count in [c_min, c_max] and keeps the model with the
/// smallest DB index (ties toward fewer clusters).
SelectionResult select_C(const Eigen::MatrixXf& Z, int c_min, int c_max,
                         std::uint64_t seed, const FitOptions& options = {});

/// Pairwise cosine distances between the centroids of two models:
/// entry (i, j) = 1 - cos(a_i, b_j).
Eigen::MatrixXd centroid_correspondence(const ClusterModel& a, const ClusterModel& b);

io::ModelContainer to_container(const ClusterModel& m);
ClusterModel cluster_from_container(const io::ModelContainer& c);

}  // namespace octa::cluster
