#include "octa/cluster.hpp"

#include <cmath>
#include <limits>

#include "octa/csv.hpp"
#include "octa/errors.hpp"
#include "octa/rng.hpp"

namespace octa::cluster {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Unit-normalized rows in double precision; zero rows stay zero and are
// reported through keep (false).
Eigen::MatrixXd normalize_rows(const Eigen::MatrixXd& Z, std::vector<bool>* keep) {
  Eigen::MatrixXd out = Z;
  if (keep) keep->assign(Z.rows(), true);
  for (Eigen::Index i = 0; i < Z.rows(); ++i) {
    const double n = out.row(i).norm();
    if (n > 0) {
      out.row(i) /= n;
    } else if (keep) {
      (*keep)[i] = false;
    }
  }
  return out;
}

// Assignment by max cosine over unit rows; ties toward the smaller index.
void assign_units(const Eigen::MatrixXd& U, const Eigen::MatrixXd& centroids,
                  std::vector<int>* labels, double* objective) {
  const Eigen::MatrixXd sims = U * centroids.transpose();
  labels->resize(U.rows());
  double obj = 0;
  for (Eigen::Index i = 0; i < U.rows(); ++i) {
    int best = 0;
    double best_sim = sims(i, 0);
    for (Eigen::Index j = 1; j < sims.cols(); ++j) {
      if (sims(i, j) > best_sim) {
        best_sim = sims(i, j);
        best = static_cast<int>(j);
      }
    }
    (*labels)[i] = best;
    obj += 1.0 - best_sim;
  }
  if (objective) *objective = obj;
}

Eigen::MatrixXd kmeanspp_seed(const Eigen::MatrixXd& U, int n_clusters, Rng& rng) {
  const auto n = static_cast<int>(U.rows());
  Eigen::MatrixXd centroids(n_clusters, U.cols());
  centroids.row(0) = U.row(static_cast<Eigen::Index>(rng.uniform_int(n)));
  Eigen::VectorXd dist(n);
  for (int i = 0; i < n; ++i)
    dist[i] = 1.0 - U.row(i).dot(centroids.row(0));
  for (int k = 1; k < n_clusters; ++k) {
    const double total = dist.cwiseMax(0.0).sum();
    if (total <= 1e-15)
      throw ValueError("fewer distinct directions than requested clusters");
    double pick = rng.uniform() * total;
    int chosen = n - 1;
    for (int i = 0; i < n; ++i) {
      const double wgt = std::max(0.0, dist[i]);
      if (pick < wgt) {
        chosen = i;
        break;
      }
      pick -= wgt;
    }
    centroids.row(k) = U.row(chosen);
    for (int i = 0; i < n; ++i)
      dist[i] = std::min(dist[i], 1.0 - U.row(i).dot(centroids.row(k)));
  }
  return centroids;
}

}  // namespace

std::pair<Eigen::MatrixXf, Eigen::VectorXf> shift_nonnegative(const Eigen::MatrixXf& Z) {
  if (Z.rows() == 0) throw ValueError("cannot shift an empty matrix");
  if (!Z.allFinite()) throw ValueError("embeddings contain non-finite values");
  Eigen::VectorXf shift = Z.colwise().minCoeff().transpose();
  Eigen::MatrixXf shifted = Z;
  shifted.rowwise() -= shift.transpose();
  return {std::move(shifted), std::move(shift)};
}

ClusterModel fit_spherical_kmeans(const Eigen::MatrixXf& Z, int n_clusters,
                                  std::uint64_t seed, const FitOptions& options,
                                  FitTrace* trace) {
  if (n_clusters < 2) throw ValueError("need at least two clusters");
  if ((Z.array() < 0.0f).any())
    throw ValueError("spherical k-means expects nonnegative-shifted data");

  std::vector<bool> keep;
  const Eigen::MatrixXd normalized = normalize_rows(Z.cast<double>(), &keep);
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < normalized.rows(); ++i)
    if (keep[i]) rows.push_back(i);
  if (static_cast<int>(rows.size()) < n_clusters)
    throw ValueError("fewer usable samples than clusters");
  Eigen::MatrixXd U(rows.size(), normalized.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) U.row(i) = normalized.row(rows[i]);
  const auto n = static_cast<int>(U.rows());

  ClusterModel best;
  best.objective = kInf;
  if (trace) trace->objective_per_iter.clear();

  for (int restart = 0; restart < options.restarts; ++restart) {
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(restart)));
    Eigen::MatrixXd centroids = kmeanspp_seed(U, n_clusters, rng);
    std::vector<int> labels, prev_labels;
    double objective = kInf;
    std::vector<double> restart_trace;

    for (int iter = 0; iter < options.max_iters; ++iter) {
      assign_units(U, centroids, &labels, &objective);
      restart_trace.push_back(objective);
      if (labels == prev_labels) break;
      prev_labels = labels;

      Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(n_clusters, U.cols());
      std::vector<long> counts(n_clusters, 0);
      for (int i = 0; i < n; ++i) {
        sums.row(labels[i]) += U.row(i);
        ++counts[labels[i]];
      }
      for (int k = 0; k < n_clusters; ++k) {
        if (counts[k] == 0) {
          // Re-seed from the point farthest from its current centroid.
          int far_idx = 0;
          double far_dist = -kInf;
          for (int i = 0; i < n; ++i) {
            const double d = 1.0 - U.row(i).dot(centroids.row(labels[i]));
            if (d > far_dist) {
              far_dist = d;
              far_idx = i;
            }
          }
          centroids.row(k) = U.row(far_idx);
          continue;
        }
        const double norm = sums.row(k).norm();
        if (norm > 0)
          centroids.row(k) = sums.row(k) / norm;
        // A zero mean cannot happen on nonnegative unit inputs, but if it
        // ever did we keep the previous centroid.
      }
    }

    if (objective < best.objective) {
      best.centroids = centroids;
      best.objective = objective;
    }
    if (trace) trace->objective_per_iter.push_back(std::move(restart_trace));
  }

  best.shift = Eigen::VectorXd::Zero(Z.cols());
  return best;
}

int ClusterModel::assign(const Eigen::VectorXf& z, bool* degenerate) const {
  if (z.size() != dim()) throw ShapeError("embedding width does not match the model");
  Eigen::VectorXd v = z.cast<double>() - shift;
  const double n = v.norm();
  if (degenerate) *degenerate = false;
  if (n == 0.0) {
    if (degenerate) *degenerate = true;
    return 0;
  }
  v /= n;
  const Eigen::VectorXd sims = centroids * v;
  int best = 0;
  for (Eigen::Index j = 1; j < sims.size(); ++j)
    if (sims[j] > sims[best]) best = static_cast<int>(j);
  return best;
}

std::vector<int> ClusterModel::assign_batch(const Eigen::MatrixXf& Z) const {
  std::vector<int> out(Z.rows());
  for (Eigen::Index i = 0; i < Z.rows(); ++i) out[i] = assign(Z.row(i));
  return out;
}

double db_index(const ClusterModel& model, const Eigen::MatrixXf& Z) {
  const int C = model.n_clusters();
  if (Z.cols() != model.dim()) throw ShapeError("data width does not match the model");

  // Coincident centroids sentinel, checked before anything else: with two
  // identical centroids one of them necessarily ends up memberless.
  for (int i = 0; i < C; ++i)
    for (int j = i + 1; j < C; ++j)
      if (1.0 - model.centroids.row(i).dot(model.centroids.row(j)) <= 1e-12)
        return kInf;

  std::vector<bool> keep;
  const Eigen::MatrixXd U = normalize_rows(Z.cast<double>(), &keep);
  std::vector<int> labels;
  double obj;
  assign_units(U, model.centroids, &labels, &obj);

  Eigen::VectorXd scatter = Eigen::VectorXd::Zero(C);
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(C);
  for (Eigen::Index i = 0; i < U.rows(); ++i) {
    if (!keep[i]) continue;
    const int k = labels[i];
    scatter[k] += 1.0 - U.row(i).dot(model.centroids.row(k));
    counts[k] += 1.0;
  }
  for (int k = 0; k < C; ++k) {
    if (counts[k] == 0)
      throw ValueError("cluster " + std::to_string(k) + " owns no data points");
    scatter[k] /= counts[k];
  }

  double db = 0;
  for (int i = 0; i < C; ++i) {
    double worst = -kInf;
    for (int j = 0; j < C; ++j) {
      if (j == i) continue;
      const double m = 1.0 - model.centroids.row(i).dot(model.centroids.row(j));
      const double r = m > 0 ? (scatter[i] + scatter[j]) / m : kInf;
      worst = std::max(worst, r);
    }
    if (worst == kInf) return kInf;
    db += worst;
  }
  return db / C;
}

SelectionResult select_C(const Eigen::MatrixXf& Z, int c_min, int c_max,
                         std::uint64_t seed, const FitOptions& options) {
  if (c_min < 2 || c_max < c_min) throw ValueError("invalid cluster count range");
  SelectionResult result;
  double best_db = kInf;
  for (int c = c_min; c <= c_max; ++c) {
    ClusterModel model =
        fit_spherical_kmeans(Z, c, Rng::derive(seed, static_cast<std::uint64_t>(c)),
                             options);
    const double db = db_index(model, Z);
    result.curve.emplace_back(c, db);
    if (db < best_db) {
      best_db = db;
      result.best = std::move(model);
    }
  }
  if (result.best.n_clusters() == 0)
    throw ConvergenceError("no cluster count produced a finite DB index");
  return result;
}

Eigen::MatrixXd centroid_correspondence(const ClusterModel& a, const ClusterModel& b) {
  if (a.dim() != b.dim()) throw ShapeError("models embed in different dimensions");
  return (1.0 - (a.centroids * b.centroids.transpose()).array()).matrix();
}

io::ModelContainer to_container(const ClusterModel& m) {
  io::ModelContainer c;
  c.kind = "cluster";
  c.attrs["objective"] = io::fmt_g(m.objective);
  c.matrices["centroids"] = m.centroids.cast<float>();
  c.matrices["shift"] = m.shift.cast<float>();
  return c;
}

ClusterModel cluster_from_container(const io::ModelContainer& c) {
  if (c.kind != "cluster")
    throw FormatError("expected a cluster container, found '" + c.kind + "'");
  ClusterModel m;
  m.objective = c.attr_double("objective");
  m.centroids = c.matrix("centroids").cast<double>();
  m.shift = c.matrix("shift").col(0).cast<double>();
  // f32 storage perturbs the norms; restore the unit-norm invariant.
  for (Eigen::Index i = 0; i < m.centroids.rows(); ++i) {
    const double n = m.centroids.row(i).norm();
    if (n > 0) m.centroids.row(i) /= n;
  }
  return m;
}

}  // namespace octa::cluster
