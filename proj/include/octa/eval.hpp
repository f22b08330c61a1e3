#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "octa/errors.hpp"
#include "octa/image.hpp"

namespace octa::eval {

struct SegMetrics {
  double dice = 0, precision = 0, recall = 0, specificity = 0, accuracy = 0;
  long long tp = 0, fp = 0, fn = 0, tn = 0;
};

/// Metrics from raw counts. Ratios with a zero denominator (e.g. recall when
/// nothing is annotated) are reported as 1.0: an empty claim matched by an
/// empty truth counts as agreement.
SegMetrics seg_metrics_from_counts(long long tp, long long fp, long long fn,
                                   long long tn);

/// Pixel-level metrics restricted to the region of interest (nonzero roi
/// pixels). pred/gt are label grids where nonzero means anomalous.
SegMetrics seg_metrics(const Image<std::uint16_t>& pred,
                       const Image<std::uint16_t>& gt,
                       const Image<std::uint8_t>& roi);

struct MeanStd {
  double mean = 0, stddev = 0;
};

/// Sample mean and standard deviation (n-1 denominator; 0 for n < 2).
MeanStd mean_std(std::span<const double> values);

struct PrPoint {
  double nu = 0, recall = 0, precision = 0;
};

/// (recall, precision) pairs ordered by the parameter that produced them.
std::vector<PrPoint> pr_curve(const std::vector<std::pair<double, SegMetrics>>& by_nu);

/// Area under the ROC curve via the Mann-Whitney statistic; ties count 0.5.
/// Throws if either class is absent.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

/// Two-sided p-value of the paired Wilcoxon signed-rank test. Zero
/// differences are dropped, tied magnitudes are mid-ranked. Exact null
/// distribution for up to 20 non-zero pairs, normal approximation with
/// continuity correction above. Requires at least 6 non-zero differences.
double wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b);

struct ConfusionMatrix {
  std::vector<std::string> classes;
  std::vector<std::vector<long long>> counts;  // counts[truth][predicted]
  double accuracy = 0;
};

ConfusionMatrix confusion(const std::vector<std::string>& predicted,
                          const std::vector<std::string>& truth,
                          const std::vector<std::string>& classes);

}  // namespace octa::eval
