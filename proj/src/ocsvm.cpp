#include "octa/ocsvm.hpp"

#include <cmath>
#include <limits>

#include "octa/csv.hpp"
#include "octa/errors.hpp"
#include "octa/rng.hpp"

namespace octa::svm {
namespace {

constexpr double kBoundSlack = 1e-8;  // relative distance that counts as "at bound"

// A linear one-class boundary separates the data from the origin, so plain
// zero-mean standardization would be degenerate (the origin lands inside the
// cloud and w collapses to zero). Instead each dimension is scaled to unit
// variance and re-centered at +kOffset, which keeps the training cloud well
// inside the positive orthant.
constexpr double kOffset = 4.0;

struct Standardization {
  Eigen::VectorXd shift, inv;
};

Standardization standardize(Eigen::MatrixXd& Z) {
  Standardization s;
  const auto n = static_cast<double>(Z.rows());
  const Eigen::VectorXd mean = Z.colwise().mean().transpose();
  Z.rowwise() -= mean.transpose();
  s.inv.resize(Z.cols());
  s.shift.resize(Z.cols());
  for (Eigen::Index d = 0; d < Z.cols(); ++d) {
    const double var = Z.col(d).squaredNorm() / n;
    const double sd = std::sqrt(var);
    s.inv[d] = sd > 0 ? 1.0 / sd : 1.0;
    Z.col(d) = Z.col(d) * s.inv[d] + Eigen::VectorXd::Constant(Z.rows(), kOffset);
    // (z - shift) * inv == (z - mean) / sd + kOffset
    s.shift[d] = mean[d] - kOffset / s.inv[d];
  }
  return s;
}

}  // namespace

OcsvmModel fit(const Eigen::MatrixXf& Zin, double nu, const FitOptions& options,
               FitDiagnostics* diagnostics) {
  if (!(nu > 0.0 && nu <= 1.0)) throw ValueError("nu must lie in (0, 1]");
  if (Zin.rows() < 2) throw ValueError("need at least two training embeddings");

  Eigen::MatrixXd Z;
  if (Zin.rows() > options.subsample_threshold) {
    Rng rng(options.seed);
    const auto keep = rng.sample_indices(static_cast<int>(Zin.rows()),
                                         static_cast<int>(options.subsample_size));
    Z.resize(static_cast<Eigen::Index>(keep.size()), Zin.cols());
    for (std::size_t i = 0; i < keep.size(); ++i)
      Z.row(static_cast<Eigen::Index>(i)) = Zin.row(keep[i]).cast<double>();
  } else {
    Z = Zin.cast<double>();
  }

  const Standardization scaling = standardize(Z);
  const auto n = static_cast<int>(Z.rows());
  const double upper = 1.0 / (nu * n);

  // Feasible start with sum(alpha) = 1: the first floor(nu*n) points sit at
  // the upper bound, one carries the remainder.
  Eigen::VectorXd alpha = Eigen::VectorXd::Zero(n);
  {
    const double mass = nu * n;
    const int full = static_cast<int>(std::floor(mass));
    for (int i = 0; i < full && i < n; ++i) alpha[i] = upper;
    if (full < n) alpha[full] = (mass - full) * upper;
  }

  Eigen::VectorXd w = Z.transpose() * alpha;
  Eigen::VectorXd g(n);
  const Eigen::VectorXd norms = Z.rowwise().squaredNorm();

  long iter = 0;
  double violation = std::numeric_limits<double>::infinity();
  for (; iter < options.max_pair_updates; ++iter) {
    g.noalias() = Z * w;

    int up = -1, down = -1;
    double g_up = std::numeric_limits<double>::infinity();
    double g_down = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      if (alpha[i] < upper * (1.0 - kBoundSlack) && g[i] < g_up) {
        g_up = g[i];
        up = i;
      }
      if (alpha[i] > upper * kBoundSlack && g[i] > g_down) {
        g_down = g[i];
        down = i;
      }
    }
    if (up < 0 || down < 0) {
      violation = 0;  // box fully saturated (nu = 1)
      break;
    }
    violation = g_down - g_up;
    if (violation < options.tol) break;

    const double eta = norms[up] + norms[down] - 2.0 * Z.row(up).dot(Z.row(down));
    double t = eta > 1e-12 ? violation / eta
                           : std::numeric_limits<double>::infinity();
    t = std::min(t, std::min(upper - alpha[up], alpha[down]));
    alpha[up] += t;
    alpha[down] -= t;
    w.noalias() += t * (Z.row(up) - Z.row(down)).transpose();
  }
  if (violation >= options.tol && iter >= options.max_pair_updates)
    throw ConvergenceError("one-class SVM did not converge: residual " +
                           std::to_string(violation) + " after " +
                           std::to_string(iter) + " pair updates");

  g.noalias() = Z * w;

  // rho from the margin support vectors; fall back on the midpoint of the
  // bound sets when no alpha is strictly inside the box.
  double rho_sum = 0;
  int rho_count = 0;
  double lower_bound = -std::numeric_limits<double>::infinity();
  double upper_bound = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    if (alpha[i] > upper * kBoundSlack && alpha[i] < upper * (1.0 - kBoundSlack)) {
      rho_sum += g[i];
      ++rho_count;
    } else if (alpha[i] >= upper * (1.0 - kBoundSlack)) {
      lower_bound = std::max(lower_bound, g[i]);
    } else {
      upper_bound = std::min(upper_bound, g[i]);
    }
  }
  double rho;
  if (rho_count > 0)
    rho = rho_sum / rho_count;
  else if (std::isinf(upper_bound))
    rho = lower_bound;
  else if (std::isinf(lower_bound))
    rho = upper_bound;
  else
    rho = 0.5 * (lower_bound + upper_bound);

  OcsvmModel model;
  model.nu = static_cast<float>(nu);
  model.w = w.cast<float>();
  model.rho = static_cast<float>(rho);
  model.scale_shift = scaling.shift.cast<float>();
  model.scale_inv = scaling.inv.cast<float>();
  model.iterations = iter;
  model.kkt_violation = static_cast<float>(violation);
  if (model.w.norm() == 0.0f)
    throw ConvergenceError("one-class SVM collapsed to a zero weight vector");

  if (diagnostics != nullptr) {
    diagnostics->alpha = alpha;
    diagnostics->upper_bound = upper;
    diagnostics->objective = 0.5 * w.squaredNorm();
  }
  return model;
}

eval::SegMetrics score_volume(const OcsvmModel& model, const ValidationVolume& volume) {
  const auto s = static_cast<std::size_t>(volume.embeddings.rows());
  if (volume.anomalous_pixels.size() != s || volume.total_pixels.size() != s)
    throw ShapeError("per-superpixel pixel counts do not match the embeddings");
  const Eigen::VectorXf decisions = model.decision_batch(volume.embeddings);
  long long tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < s; ++i) {
    const long long pos = volume.anomalous_pixels[i];
    const long long neg = volume.total_pixels[i] - pos;
    if (decisions[static_cast<Eigen::Index>(i)] < 0.0f) {
      tp += pos;
      fp += neg;
    } else {
      fn += pos;
      tn += neg;
    }
  }
  return eval::seg_metrics_from_counts(tp, fp, fn, tn);
}

SweepResult sweep_nu(const Eigen::MatrixXf& Ztrain,
                     const std::vector<ValidationVolume>& validation,
                     std::span<const double> grid, const FitOptions& options) {
  if (grid.empty()) throw ValueError("empty nu grid");
  if (validation.empty()) throw ValueError("nu sweep needs validation volumes");

  SweepResult result;
  double best_dice = -1;
  for (const double nu : grid) {
    SweepPoint point;
    point.nu = nu;
    try {
      OcsvmModel model = fit(Ztrain, nu, options);
      std::vector<double> dice, precision, recall, specificity, accuracy;
      for (const auto& volume : validation) {
        const eval::SegMetrics m = score_volume(model, volume);
        dice.push_back(m.dice);
        precision.push_back(m.precision);
        recall.push_back(m.recall);
        specificity.push_back(m.specificity);
        accuracy.push_back(m.accuracy);
      }
      point.mean.dice = eval::mean_std(dice).mean;
      point.mean.precision = eval::mean_std(precision).mean;
      point.mean.recall = eval::mean_std(recall).mean;
      point.mean.specificity = eval::mean_std(specificity).mean;
      point.mean.accuracy = eval::mean_std(accuracy).mean;
      point.ok = true;
      if (point.mean.dice > best_dice) {
        best_dice = point.mean.dice;
        result.best_index = static_cast<int>(result.points.size());
        result.best_model = std::move(model);
      }
    } catch (const Error& e) {
      point.ok = false;
      point.error = e.what();
    }
    result.points.push_back(std::move(point));
  }
  if (result.best_index < 0)
    throw ConvergenceError("every nu grid point failed to fit");
  return result;
}

io::ModelContainer to_container(const OcsvmModel& m) {
  io::ModelContainer c;
  c.kind = "ocsvm";
  c.attrs["nu"] = io::fmt_g(m.nu);
  c.attrs["rho"] = io::fmt_g(m.rho);
  c.attrs["iterations"] = std::to_string(m.iterations);
  c.attrs["kkt_violation"] = io::fmt_g(m.kkt_violation);
  c.matrices["w"] = m.w;
  c.matrices["scale_shift"] = m.scale_shift;
  c.matrices["scale_inv"] = m.scale_inv;
  return c;
}

OcsvmModel ocsvm_from_container(const io::ModelContainer& c) {
  if (c.kind != "ocsvm")
    throw FormatError("expected an ocsvm container, found '" + c.kind + "'");
  OcsvmModel m;
  m.nu = static_cast<float>(c.attr_double("nu"));
  m.rho = static_cast<float>(c.attr_double("rho"));
  m.iterations = static_cast<long>(c.attr_int("iterations"));
  m.kkt_violation = static_cast<float>(c.attr_double("kkt_violation"));
  m.w = c.matrix("w").col(0);
  m.scale_shift = c.matrix("scale_shift").col(0);
  m.scale_inv = c.matrix("scale_inv").col(0);
  return m;
}

}  // namespace octa::svm
