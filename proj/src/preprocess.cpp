#include "octa/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace octa::prep {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr int kMinSurfaceGap = 8;  // px between ILM and BM paths

Image<float> to_float(const BScan& bscan) {
  Image<float> out(bscan.width(), bscan.height());
  const float inv = 1.0f / static_cast<float>(bscan.maxval);
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data()[i] = bscan.pixels.data()[i] * inv;
  return out;
}

Image<float> box3(const Image<float>& in) {
  const int w = in.width(), h = in.height();
  Image<float> out(w, h);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      float sum = 0;
      int n = 0;
      for (int dr = -1; dr <= 1; ++dr) {
        for (int dc = -1; dc <= 1; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
          sum += in.at(rr, cc);
          ++n;
        }
      }
      out.at(r, c) = sum / static_cast<float>(n);
    }
  }
  return out;
}

// Minimal-cost smooth path across columns; cost(r, c) = +inf marks forbidden
// rows. Ties prefer the smaller row.
std::vector<int> dp_path(const Image<double>& cost, int max_step) {
  const int w = cost.width(), h = cost.height();
  Image<double> acc(w, h, kInf);
  Image<std::int16_t> back(w, h, 0);
  for (int r = 0; r < h; ++r) acc.at(r, 0) = cost.at(r, 0);
  for (int c = 1; c < w; ++c) {
    for (int r = 0; r < h; ++r) {
      if (cost.at(r, c) == kInf) continue;
      double best = kInf;
      int best_prev = -1;
      for (int d = -max_step; d <= max_step; ++d) {
        const int pr = r + d;
        if (pr < 0 || pr >= h) continue;
        const double v = acc.at(pr, c - 1);
        if (v < best) {
          best = v;
          best_prev = pr;
        }
      }
      if (best_prev < 0) continue;
      acc.at(r, c) = best + cost.at(r, c);
      back.at(r, c) = static_cast<std::int16_t>(best_prev);
    }
  }
  int end_row = -1;
  double best = kInf;
  for (int r = 0; r < h; ++r) {
    if (acc.at(r, w - 1) < best) {
      best = acc.at(r, w - 1);
      end_row = r;
    }
  }
  if (end_row < 0) return {};
  std::vector<int> path(w);
  path[w - 1] = end_row;
  for (int c = w - 1; c > 0; --c) path[c - 1] = back.at(path[c], c);
  return path;
}

}  // namespace

LayerSurfaces find_surfaces(const BScan& bscan) {
  const int w = bscan.width(), h = bscan.height();
  if (w < 8 || h < 2 * kMinSurfaceGap)
    throw SegmentationError("B-scan too small for surface segmentation");

  const auto [mn, mx] = std::minmax_element(bscan.pixels.data().begin(),
                                            bscan.pixels.data().end());
  if (*mn == *mx)
    throw SegmentationError("B-scan has no intensity variation");

  const Image<float> smooth = box3(box3(to_float(bscan)));

  // Central vertical gradient; positive where the image brightens downward.
  Image<double> grad(w, h, 0.0);
  for (int r = 1; r < h - 1; ++r)
    for (int c = 0; c < w; ++c)
      grad.at(r, c) = static_cast<double>(smooth.at(r + 1, c)) - smooth.at(r - 1, c);

  LayerSurfaces out;

  // ILM: strongest dark-to-bright transition.
  Image<double> cost_ilm(w, h, kInf);
  for (int r = 1; r < h - 1; ++r)
    for (int c = 0; c < w; ++c) cost_ilm.at(r, c) = -grad.at(r, c);
  out.ilm = dp_path(cost_ilm, out.smoothness_bound);
  if (out.ilm.empty()) throw SegmentationError("no feasible ILM path");

  // BM: strongest bright-to-dark transition below the ILM.
  Image<double> cost_bm(w, h, kInf);
  for (int c = 0; c < w; ++c)
    for (int r = out.ilm[c] + kMinSurfaceGap; r < h - 1; ++r)
      cost_bm.at(r, c) = grad.at(r, c);
  out.bm = dp_path(cost_bm, out.smoothness_bound);
  if (out.bm.empty()) throw SegmentationError("no feasible BM path");

  try {
    out.validate(h);
  } catch (const Error& e) {
    throw SegmentationError(std::string("surface segmentation failed: ") + e.what());
  }
  return out;
}

FlattenResult flatten(const BScan& bscan, const LayerSurfaces& surfaces,
                      int target_row) {
  const int w = bscan.width(), h = bscan.height();
  surfaces.validate(h);
  if (surfaces.width() != w) throw ShapeError("surfaces do not match the B-scan width");
  const int target = target_row >= 0
                         ? target_row
                         : *std::max_element(surfaces.bm.begin(), surfaces.bm.end());
  if (target >= h) throw ValueError("flatten target row outside the image");

  FlattenResult out;
  out.target_row = target;
  out.bscan.maxval = bscan.maxval;
  out.bscan.pixels = Image<std::uint16_t>(w, h, 0);
  out.surfaces.ilm.resize(w);
  out.surfaces.bm.resize(w);
  // Shifting columns independently can double the column-to-column step.
  out.surfaces.smoothness_bound = 2 * surfaces.smoothness_bound;

  for (int c = 0; c < w; ++c) {
    const int shift = target - surfaces.bm[c];
    for (int r = 0; r < h; ++r) {
      const int src = r - shift;
      if (src >= 0 && src < h) out.bscan.pixels.at(r, c) = bscan.pixels.at(src, c);
    }
    out.surfaces.ilm[c] = std::clamp(surfaces.ilm[c] + shift, 0, h - 1);
    out.surfaces.bm[c] = target;
  }
  out.surfaces.validate(h);
  return out;
}

NormalizedBScan normalize(const BScan& bscan) {
  const std::size_t n = bscan.pixels.size();
  if (n == 0) throw ValueError("cannot normalize an empty B-scan");
  std::vector<std::uint16_t> sorted(bscan.pixels.data());
  std::sort(sorted.begin(), sorted.end());
  const auto pick = [&](double q) {
    const auto idx = static_cast<std::size_t>(
        std::llround(q * static_cast<double>(n - 1)));
    return sorted[idx];
  };
  const float lo = pick(0.01);
  const float hi = pick(0.99);
  if (!(hi > lo))
    throw ValueError("degenerate intensity range: p1 == p99");

  NormalizedBScan out;
  out.pixels = Image<float>(bscan.width(), bscan.height());
  const float scale = hi - lo;
  for (std::size_t i = 0; i < n; ++i) {
    const float v = (static_cast<float>(bscan.pixels.data()[i]) - lo) / scale;
    out.pixels.data()[i] = std::clamp(v, 0.0f, 1.0f);
  }
  return out;
}

namespace {

struct SlicCenter {
  double row = 0, col = 0, intensity = 0;
  long count = 0;
};

// Merge superpixels smaller than min_area into the neighbor sharing the
// longest border; counted so callers can surface a warning.
void merge_small(Image<std::int32_t>& labels, int n_labels, int min_area, int* merged) {
  const int w = labels.width(), h = labels.height();
  for (;;) {
    std::vector<long> area(n_labels, 0);
    for (const auto v : labels.data())
      if (v >= 0) ++area[v];
    int victim = -1;
    for (int k = 0; k < n_labels; ++k) {
      if (area[k] > 0 && area[k] < min_area) {
        victim = k;
        break;
      }
    }
    if (victim < 0) return;
    std::vector<long> border(n_labels, 0);
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        if (labels.at(r, c) != victim) continue;
        const int dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
        for (int d = 0; d < 4; ++d) {
          const int rr = r + dr[d], cc = c + dc[d];
          if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
          const int other = labels.at(rr, cc);
          if (other >= 0 && other != victim) ++border[other];
        }
      }
    }
    int target = -1;
    long best = -1;
    for (int k = 0; k < n_labels; ++k) {
      if (border[k] > best) {
        best = border[k];
        target = k;
      }
    }
    if (best <= 0) {
      // Isolated sliver: fold it into the nearest non-victim label by scan
      // order to keep every retinal pixel assigned.
      target = -1;
      for (int k = 0; k < n_labels && target < 0; ++k)
        if (k != victim && area[k] > 0) target = k;
      if (target < 0) return;  // single superpixel overall; nothing to do
    }
    for (auto& v : labels.data())
      if (v == victim) v = target;
    ++(*merged);
  }
}

}  // namespace

SuperpixelMap oversegment(const NormalizedBScan& bscan, const LayerSurfaces& surfaces,
                          SuperpixelMode mode, int step, int iters) {
  const int w = bscan.width(), h = bscan.height();
  surfaces.validate(h);
  if (surfaces.width() != w) throw ShapeError("surfaces do not match the B-scan width");
  if (step < 1) throw ValueError("superpixel step must be positive");

  const auto in_retina = [&](int r, int c) {
    return r >= surfaces.ilm[c] && r <= surfaces.bm[c];
  };

  // Grid initialization: absolute step x step cells clipped to the retina.
  std::map<std::pair<int, int>, int> cell_ids;
  Image<std::int32_t> labels(w, h, -1);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      if (in_retina(r, c)) cell_ids.emplace(std::make_pair(r / step, c / step), -1);
  int next = 0;
  for (auto& [cell, id] : cell_ids) id = next++;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      if (in_retina(r, c)) labels.at(r, c) = cell_ids[{r / step, c / step}];
  int n_labels = next;
  if (n_labels == 0) throw ValueError("retinal region is empty");

  if (mode == SuperpixelMode::Slic) {
    std::vector<SlicCenter> centers(n_labels);
    const auto recompute_centers = [&]() {
      for (auto& ctr : centers) ctr = SlicCenter{};
      for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
          const int k = labels.at(r, c);
          if (k < 0) continue;
          centers[k].row += r;
          centers[k].col += c;
          centers[k].intensity += bscan.pixels.at(r, c);
          centers[k].count += 1;
        }
      }
      for (auto& ctr : centers) {
        if (ctr.count > 0) {
          ctr.row /= ctr.count;
          ctr.col /= ctr.count;
          ctr.intensity /= ctr.count;
        }
      }
    };
    recompute_centers();

    const int window = 2 * step;
    Image<float> dist(w, h, std::numeric_limits<float>::infinity());
    for (int it = 0; it < iters; ++it) {
      std::fill(dist.data().begin(), dist.data().end(),
                std::numeric_limits<float>::infinity());
      for (int k = 0; k < n_labels; ++k) {
        const auto& ctr = centers[k];
        if (ctr.count == 0) continue;
        const int r0 = std::max(0, static_cast<int>(ctr.row) - window);
        const int r1 = std::min(h - 1, static_cast<int>(ctr.row) + window);
        const int c0 = std::max(0, static_cast<int>(ctr.col) - window);
        const int c1 = std::min(w - 1, static_cast<int>(ctr.col) + window);
        for (int r = r0; r <= r1; ++r) {
          for (int c = c0; c <= c1; ++c) {
            if (!in_retina(r, c)) continue;
            const double di = std::abs(bscan.pixels.at(r, c) - ctr.intensity);
            const double dr = r - ctr.row, dc = c - ctr.col;
            const double ds = std::sqrt(dr * dr + dc * dc) / step;
            const auto d = static_cast<float>(di + 0.5 * ds);
            if (d < dist.at(r, c)) {
              dist.at(r, c) = d;
              labels.at(r, c) = k;
            }
          }
        }
      }
      // Any retinal pixel left outside every window falls back on the
      // spatially nearest center.
      for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
          if (!in_retina(r, c) || std::isfinite(dist.at(r, c))) continue;
          double best = std::numeric_limits<double>::infinity();
          int best_k = 0;
          for (int k = 0; k < n_labels; ++k) {
            if (centers[k].count == 0) continue;
            const double dr = r - centers[k].row, dc = c - centers[k].col;
            const double d = dr * dr + dc * dc;
            if (d < best) {
              best = d;
              best_k = k;
            }
          }
          labels.at(r, c) = best_k;
        }
      }
      recompute_centers();
    }
  }

  SuperpixelMap out;
  out.labels = std::move(labels);
  // Anything below half the nominal cell area (thin-retina slivers, clipped
  // border cells) is folded into a neighbor.
  merge_small(out.labels, n_labels, step * step / 2, &out.merged);

  // Compact ids and compute centroids.
  std::vector<int> remap(n_labels, -1);
  int compact = 0;
  for (const auto v : out.labels.data())
    if (v >= 0 && remap[v] < 0) remap[v] = 0;
  for (int k = 0; k < n_labels; ++k)
    if (remap[k] == 0) remap[k] = compact++;
  std::vector<double> sum_r(compact, 0), sum_c(compact, 0);
  std::vector<long> count(compact, 0);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      auto& v = out.labels.at(r, c);
      if (v < 0) continue;
      v = remap[v];
      sum_r[v] += r;
      sum_c[v] += c;
      ++count[v];
    }
  }
  out.centers.resize(compact);
  for (int k = 0; k < compact; ++k) {
    float row = static_cast<float>(sum_r[k] / count[k]);
    const float col = static_cast<float>(sum_c[k] / count[k]);
    const int ci = std::clamp(static_cast<int>(std::lround(col)), 0, w - 1);
    row = std::clamp(row, static_cast<float>(surfaces.ilm[ci]),
                     static_cast<float>(surfaces.bm[ci]));
    out.centers[k] = {row, col};
  }
  return out;
}

}  // namespace octa::prep
