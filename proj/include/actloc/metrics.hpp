#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "actloc/data.hpp"
#include "actloc/tensor.hpp"

namespace actloc {

// mask = 1 iff p > theta, strictly.
inline std::vector<std::uint8_t> binarize(const Tensor& map, double theta) {
  if (map.ndim() != 2)
    throw std::invalid_argument("binarize: expected [H,W], got " + shape_str(map.shape()));
  if (!(theta > 0.0 && theta < 1.0))
    throw std::invalid_argument("binarize: threshold must be inside (0,1)");
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(map.size()));
  for (long long i = 0; i < map.size(); ++i) mask[static_cast<std::size_t>(i)] = map[i] > theta ? 1 : 0;
  return mask;
}

struct Components {
  std::vector<int> labels;        // 0 = background; components numbered from 1
  std::vector<long long> counts;  // counts[l] = pixels of component l; counts[0] unused
  int count() const { return static_cast<int>(counts.size()) - 1; }
};

// 8-connectivity labeling via union-find; final labels are renumbered by the
// first pixel of each component in row-major order.
inline Components connected_components(const std::vector<std::uint8_t>& mask, int h, int w) {
  if (static_cast<long long>(mask.size()) != static_cast<long long>(h) * w)
    throw std::invalid_argument("connected_components: mask size does not match dimensions");
  std::vector<int> parent(mask.size());
  std::iota(parent.begin(), parent.end(), 0);
  std::vector<int> rank(mask.size(), 0);
  auto find = [&](int a) {
    while (parent[static_cast<std::size_t>(a)] != a) {
      parent[static_cast<std::size_t>(a)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(a)])];
      a = parent[static_cast<std::size_t>(a)];
    }
    return a;
  };
  auto unite = [&](int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (rank[static_cast<std::size_t>(a)] < rank[static_cast<std::size_t>(b)]) std::swap(a, b);
    parent[static_cast<std::size_t>(b)] = a;
    if (rank[static_cast<std::size_t>(a)] == rank[static_cast<std::size_t>(b)]) ++rank[static_cast<std::size_t>(a)];
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int i = y * w + x;
      if (!mask[static_cast<std::size_t>(i)]) continue;
      // Link to the four already-visited neighbors (W, NW, N, NE).
      if (x > 0 && mask[static_cast<std::size_t>(i - 1)]) unite(i, i - 1);
      if (y > 0) {
        if (x > 0 && mask[static_cast<std::size_t>(i - w - 1)]) unite(i, i - w - 1);
        if (mask[static_cast<std::size_t>(i - w)]) unite(i, i - w);
        if (x < w - 1 && mask[static_cast<std::size_t>(i - w + 1)]) unite(i, i - w + 1);
      }
    }
  }
  Components out;
  out.labels.assign(mask.size(), 0);
  out.counts.assign(1, 0);
  std::vector<int> root_label(mask.size(), 0);
  for (int i = 0; i < static_cast<int>(mask.size()); ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    const int r = find(i);
    if (root_label[static_cast<std::size_t>(r)] == 0) {
      root_label[static_cast<std::size_t>(r)] = static_cast<int>(out.counts.size());
      out.counts.push_back(0);
    }
    const int l = root_label[static_cast<std::size_t>(r)];
    out.labels[static_cast<std::size_t>(i)] = l;
    ++out.counts[static_cast<std::size_t>(l)];
  }
  return out;
}

// Tight box of the largest component (ties broken toward the earlier label);
// empty when the mask has no foreground.
inline std::optional<Box> extract_box(const std::vector<std::uint8_t>& mask, int h, int w) {
  const Components cc = connected_components(mask, h, w);
  if (cc.count() == 0) return std::nullopt;
  int best = 1;
  for (int l = 2; l <= cc.count(); ++l)
    if (cc.counts[static_cast<std::size_t>(l)] > cc.counts[static_cast<std::size_t>(best)]) best = l;
  Box box{w, h, -1, -1};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (cc.labels[static_cast<std::size_t>(y * w + x)] == best) {
        box.x_min = std::min(box.x_min, x);
        box.y_min = std::min(box.y_min, y);
        box.x_max = std::max(box.x_max, x + 1);
        box.y_max = std::max(box.y_max, y + 1);
      }
  return box;
}

// Threshold, take the dominant blob, fall back to the full image when empty.
inline Box box_from_map(const Tensor& map, double theta) {
  const int h = map.dim(0), w = map.dim(1);
  auto box = extract_box(binarize(map, theta), h, w);
  return box ? *box : Box{0, 0, w, h};
}

inline double iou(const Box& a, const Box& b) {
  const int ix0 = std::max(a.x_min, b.x_min), iy0 = std::max(a.y_min, b.y_min);
  const int ix1 = std::min(a.x_max, b.x_max), iy1 = std::min(a.y_max, b.y_max);
  const long long inter = static_cast<long long>(std::max(0, ix1 - ix0)) * std::max(0, iy1 - iy0);
  const long long uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

struct PredictionRecord {
  Box pred_box;
  int top1 = -1;
  std::vector<int> top5;
  int truth = -1;
  Box gt_box;
};

struct MetricsReport {
  double corloc = 0.0;
  double top1_locerr = 0.0;
  double top5_locerr = 0.0;
  double top1_clserr = 0.0;
  double top5_clserr = 0.0;
  std::array<long long, 100> histogram{};
  double uncertain_mass = 0.0;
};

// Highest min(5,k) classes by logit, descending, lower index first on ties.
inline std::vector<int> top5_classes(const double* logits, int k) {
  std::vector<int> idx(static_cast<std::size_t>(k));
  std::iota(idx.begin(), idx.end(), 0);
  const int m = std::min(5, k);
  std::partial_sort(idx.begin(), idx.begin() + m, idx.end(), [&](int a, int b) {
    if (logits[a] != logits[b]) return logits[a] > logits[b];
    return a < b;
  });
  idx.resize(static_cast<std::size_t>(m));
  return idx;
}

inline MetricsReport score_dataset(const std::vector<PredictionRecord>& records) {
  if (records.empty()) throw std::invalid_argument("score_dataset: no records");
  long long loc_ok = 0, top1_joint = 0, top5_joint = 0, top1_cls = 0, top5_cls = 0;
  for (const auto& r : records) {
    const bool loc = iou(r.pred_box, r.gt_box) >= 0.5;
    const bool cls1 = r.top1 == r.truth;
    const bool cls5 = std::find(r.top5.begin(), r.top5.end(), r.truth) != r.top5.end();
    loc_ok += loc;
    top1_joint += loc && cls1;
    top5_joint += loc && cls5;
    top1_cls += cls1;
    top5_cls += cls5;
  }
  const double n = static_cast<double>(records.size());
  MetricsReport rep;
  rep.corloc = static_cast<double>(loc_ok) / n;
  rep.top1_locerr = 1.0 - static_cast<double>(top1_joint) / n;
  rep.top5_locerr = 1.0 - static_cast<double>(top5_joint) / n;
  rep.top1_clserr = 1.0 - static_cast<double>(top1_cls) / n;
  rep.top5_clserr = 1.0 - static_cast<double>(top5_cls) / n;
  return rep;
}

struct HistogramResult {
  std::array<long long, 100> bins{};
  double uncertain_mass = 0.0;  // fraction of pixels in [0.4, 0.6]
  long long total = 0;
};

// Bin i covers [i/100, (i+1)/100); the last bin also includes 1.0.
inline HistogramResult activation_histogram(const std::vector<Tensor>& maps) {
  HistogramResult res;
  long long uncertain = 0;
  for (const Tensor& m : maps) {
    for (long long i = 0; i < m.size(); ++i) {
      const double p = m[i];
      int bin = static_cast<int>(std::floor(p * 100.0));
      bin = std::clamp(bin, 0, 99);
      ++res.bins[static_cast<std::size_t>(bin)];
      if (p >= 0.4 && p <= 0.6) ++uncertain;
      ++res.total;
    }
  }
  if (res.total > 0) res.uncertain_mass = static_cast<double>(uncertain) / static_cast<double>(res.total);
  return res;
}

// --- report files -------------------------------------------------------------

inline void write_metrics_csv(const std::string& path, const MetricsReport& rep) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_metrics_csv: cannot open " + path);
  f.precision(17);
  f << "metric,value\n";
  f << "corloc," << rep.corloc << "\n";
  f << "top1_locerr," << rep.top1_locerr << "\n";
  f << "top5_locerr," << rep.top5_locerr << "\n";
  f << "top1_clserr," << rep.top1_clserr << "\n";
  f << "top5_clserr," << rep.top5_clserr << "\n";
  f << "uncertain_mass," << rep.uncertain_mass << "\n";
}

inline void write_histogram_csv(const std::string& path, const HistogramResult& hist) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_histogram_csv: cannot open " + path);
  f.precision(17);
  f << "bin_low,bin_high,count\n";
  for (int i = 0; i < 100; ++i)
    f << i / 100.0 << "," << (i + 1) / 100.0 << "," << hist.bins[static_cast<std::size_t>(i)] << "\n";
  f << "uncertain_mass,," << hist.uncertain_mass << "\n";
}

inline void write_sweep_csv(const std::string& path,
                            const std::vector<std::pair<double, double>>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_sweep_csv: cannot open " + path);
  f.precision(17);
  f << "theta,corloc\n";
  for (const auto& [theta, corloc] : rows) f << theta << "," << corloc << "\n";
}

}  // namespace actloc
