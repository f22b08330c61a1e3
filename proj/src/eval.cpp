#include "octa/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "octa/errors.hpp"

namespace octa::eval {

SegMetrics seg_metrics_from_counts(long long tp, long long fp, long long fn,
                                   long long tn) {
  const auto ratio = [](long long num, long long den) {
    return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  SegMetrics m;
  m.tp = tp;
  m.fp = fp;
  m.fn = fn;
  m.tn = tn;
  m.dice = ratio(2 * tp, 2 * tp + fp + fn);
  m.precision = ratio(tp, tp + fp);
  m.recall = ratio(tp, tp + fn);
  m.specificity = ratio(tn, tn + fp);
  const long long total = tp + fp + fn + tn;
  if (total == 0) throw ValueError("metrics over an empty region are undefined");
  m.accuracy = static_cast<double>(tp + tn) / static_cast<double>(total);
  return m;
}

SegMetrics seg_metrics(const Image<std::uint16_t>& pred,
                       const Image<std::uint16_t>& gt,
                       const Image<std::uint8_t>& roi) {
  if (!pred.same_shape(gt) || pred.width() != roi.width() ||
      pred.height() != roi.height())
    throw ShapeError("metric inputs disagree in shape");
  long long tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < roi.data().size(); ++i) {
    if (!roi.data()[i]) continue;
    const bool p = pred.data()[i] != 0;
    const bool g = gt.data()[i] != 0;
    if (p && g)
      ++tp;
    else if (p && !g)
      ++fp;
    else if (!p && g)
      ++fn;
    else
      ++tn;
  }
  if (tp + fp + fn + tn == 0) throw ValueError("region of interest is empty");
  return seg_metrics_from_counts(tp, fp, fn, tn);
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd out;
  const auto n = values.size();
  if (n == 0) return out;
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
  if (n > 1) {
    double ss = 0;
    for (const double v : values) ss += (v - out.mean) * (v - out.mean);
    out.stddev = std::sqrt(ss / static_cast<double>(n - 1));
  }
  return out;
}

std::vector<PrPoint> pr_curve(const std::vector<std::pair<double, SegMetrics>>& by_nu) {
  std::vector<PrPoint> curve;
  curve.reserve(by_nu.size());
  for (const auto& [nu, m] : by_nu) curve.push_back({nu, m.recall, m.precision});
  std::stable_sort(curve.begin(), curve.end(),
                   [](const PrPoint& a, const PrPoint& b) { return a.nu < b.nu; });
  return curve;
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw ShapeError("scores and labels differ in length");
  long long n_pos = 0, n_neg = 0;
  for (const int l : labels) (l ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0)
    throw ValueError("ROC AUC needs both classes present");

  // Mann-Whitney U from mid-ranks of the pooled sample.
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  double rank_sum_pos = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]]) rank_sum_pos += mid_rank;
    i = j + 1;
  }
  const double u = rank_sum_pos - static_cast<double>(n_pos) *
                                      (static_cast<double>(n_pos) + 1.0) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

namespace {

double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace

double wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("paired samples differ in length");
  std::vector<double> diff;
  diff.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (d != 0.0) diff.push_back(d);
  }
  const int n = static_cast<int>(diff.size());
  if (n == 0) throw ValueError("all paired differences are zero");
  if (n < 6) throw ValueError("need at least 6 non-zero differences");

  // Mid-ranks of |d|.
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
    return std::abs(diff[x]) < std::abs(diff[y]);
  });
  std::vector<double> rank(n);
  std::vector<int> tie_sizes;
  int i = 0;
  while (i < n) {
    int j = i;
    while (j + 1 < n && std::abs(diff[order[j + 1]]) == std::abs(diff[order[i]])) ++j;
    const double mid = (i + 1 + j + 1) / 2.0;
    for (int k = i; k <= j; ++k) rank[order[k]] = mid;
    tie_sizes.push_back(j - i + 1);
    i = j + 1;
  }
  double w_plus = 0;
  for (int k = 0; k < n; ++k)
    if (diff[k] > 0) w_plus += rank[k];

  if (n <= 20) {
    // Exact null: every sign pattern equally likely. Ranks are multiples of
    // 0.5, so doubling them makes the convolution integral-valued.
    const int total2 = n * (n + 1);
    std::vector<double> ways(total2 + 1, 0.0);
    ways[0] = 1.0;
    for (int k = 0; k < n; ++k) {
      const int r2 = static_cast<int>(std::llround(2.0 * rank[k]));
      for (int s = total2; s >= r2; --s) ways[s] += ways[s - r2];
    }
    const double denom = std::ldexp(1.0, n);  // 2^n
    const int w2 = static_cast<int>(std::llround(2.0 * w_plus));
    double p_le = 0, p_ge = 0;
    for (int s = 0; s <= total2; ++s) {
      if (s <= w2) p_le += ways[s];
      if (s >= w2) p_ge += ways[s];
    }
    return std::min(1.0, 2.0 * std::min(p_le, p_ge) / denom);
  }

  const double nd = n;
  const double mean = nd * (nd + 1.0) / 4.0;
  double tie_corr = 0;
  for (const int t : tie_sizes) tie_corr += static_cast<double>(t) * t * t - t;
  const double var = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0 - tie_corr / 48.0;
  if (var <= 0) throw ValueError("degenerate variance in the normal approximation");
  double z = w_plus - mean;
  z -= 0.5 * (z > 0 ? 1.0 : (z < 0 ? -1.0 : 0.0));  // continuity correction
  z /= std::sqrt(var);
  return std::min(1.0, 2.0 * normal_sf(std::abs(z)));
}

ConfusionMatrix confusion(const std::vector<std::string>& predicted,
                          const std::vector<std::string>& truth,
                          const std::vector<std::string>& classes) {
  if (predicted.size() != truth.size())
    throw ShapeError("predictions and labels differ in length");
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < classes.size(); ++i)
    index[classes[i]] = static_cast<int>(i);
  ConfusionMatrix cm;
  cm.classes = classes;
  cm.counts.assign(classes.size(), std::vector<long long>(classes.size(), 0));
  long long correct = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const auto t = index.find(truth[i]);
    const auto p = index.find(predicted[i]);
    if (t == index.end()) throw ValueError("unknown class '" + truth[i] + "'");
    if (p == index.end()) throw ValueError("unknown class '" + predicted[i] + "'");
    cm.counts[t->second][p->second]++;
    if (t->second == p->second) ++correct;
  }
  cm.accuracy = predicted.empty()
                    ? 0.0
                    : static_cast<double>(correct) / static_cast<double>(predicted.size());
  return cm;
}

}  // namespace octa::eval
