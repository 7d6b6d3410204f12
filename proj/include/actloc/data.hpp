#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "actloc/rng.hpp"
#include "actloc/tensor.hpp"

namespace actloc {

struct Box {
  int x_min = 0, y_min = 0, x_max = 0, y_max = 0;  // inclusive-exclusive corners
  int width() const { return x_max - x_min; }
  int height() const { return y_max - y_min; }
  long long area() const { return static_cast<long long>(width()) * height(); }
};

struct SyntheticSample {
  Tensor image;  // [3,H,W] in [0,1]
  int label = 0;
  Box gt_box;
};

struct DataGenConfig {
  int k = 5;  // shape classes: disk, square, triangle, cross, ring
  int H = 64;
  int W = 64;
  int n_train = 2000;
  int n_val = 500;
  int n_test = 500;
  std::uint64_t seed = 1;
  double clutter_density = 0.7;   // scales the line-segment count
  double noise_amp = 0.02;        // per-pixel background noise amplitude
  double box_frac_min = 0.12;     // sampled tight-box area fraction range
  double box_frac_max = 0.50;
};

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

namespace detail {

// Seed index bases keep the per-sample streams of the three splits disjoint.
inline std::uint64_t split_base(Split s) {
  switch (s) {
    case Split::train: return 0;
    case Split::val: return 1000000;
    default: return 2000000;
  }
}

struct Vec2 {
  double x, y;
};

inline Vec2 rot(Vec2 v, double c, double s) { return {c * v.x - s * v.y, s * v.x + c * v.y}; }

// Membership test for a unit-scale archetype at rotation theta. Coordinates
// are relative to the shape center, scale applied by the caller.
struct ShapeGeom {
  int archetype;
  double cos_t, sin_t;

  // Half-extents of the unit-scale tight box along x and y.
  Vec2 unit_extent() const {
    const double c = std::fabs(cos_t), s = std::fabs(sin_t);
    switch (archetype) {
      case 0:  // disk
      case 4:  // ring
        return {1.0, 1.0};
      case 1:  // square
        return {c + s, c + s};
      case 2: {  // equilateral triangle, circumradius 1
        double ex = 0.0, ey = 0.0;
        for (int i = 0; i < 3; ++i) {
          const double a = 1.5707963267948966 + 2.0943951023931953 * i;
          Vec2 v = rot({std::cos(a), std::sin(a)}, cos_t, sin_t);
          ex = std::max(ex, std::fabs(v.x));
          ey = std::max(ey, std::fabs(v.y));
        }
        return {ex, ey};
      }
      default: {  // cross of two bars, half-length 1, half-thickness kCrossT
        double ex = 0.0, ey = 0.0;
        const std::array<Vec2, 8> corners = {{{1, kCrossT},
                                              {1, -kCrossT},
                                              {-1, kCrossT},
                                              {-1, -kCrossT},
                                              {kCrossT, 1},
                                              {kCrossT, -1},
                                              {-kCrossT, 1},
                                              {-kCrossT, -1}}};
        for (const Vec2& p : corners) {
          Vec2 v = rot(p, cos_t, sin_t);
          ex = std::max(ex, std::fabs(v.x));
          ey = std::max(ey, std::fabs(v.y));
        }
        return {ex, ey};
      }
    }
  }

  bool inside(double x, double y) const {
    // Un-rotate the probe point into the shape frame.
    const Vec2 u = rot({x, y}, cos_t, -sin_t);
    switch (archetype) {
      case 0:
        return x * x + y * y <= 1.0;
      case 1:
        return std::fabs(u.x) <= 1.0 && std::fabs(u.y) <= 1.0;
      case 2: {
        double px = u.x, py = u.y;
        for (int i = 0; i < 3; ++i) {
          const double a0 = 1.5707963267948966 + 2.0943951023931953 * i;
          const double a1 = 1.5707963267948966 + 2.0943951023931953 * (i + 1);
          const double ax = std::cos(a0), ay = std::sin(a0);
          const double bx = std::cos(a1), by = std::sin(a1);
          if ((bx - ax) * (py - ay) - (by - ay) * (px - ax) < 0.0) return false;
        }
        return true;
      }
      case 4: {
        const double r2 = x * x + y * y;
        return r2 <= 1.0 && r2 >= kRingInner * kRingInner;
      }
      default:
        return (std::fabs(u.x) <= 1.0 && std::fabs(u.y) <= kCrossT) ||
               (std::fabs(u.y) <= 1.0 && std::fabs(u.x) <= kCrossT);
    }
  }

  static constexpr double kCrossT = 0.32;
  static constexpr double kRingInner = 0.58;
};

inline double dist_to_segment(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double cx = ax + t * dx, cy = ay + t * dy;
  return std::hypot(px - cx, py - cy);
}

}  // namespace detail

// Renders one image: textured dark background, label-independent line-segment
// clutter, then a single bright class shape painted last so the foreground
// pixel set is exact. The ground-truth box is scanned from that pixel set.
// With paint_foreground off the shape is sampled but never drawn, which
// yields the background-only twin of the sample (same clutter, same box).
inline SyntheticSample generate_sample(const DataGenConfig& cfg, int label,
                                       std::uint64_t sample_seed, bool paint_foreground = true) {
  if (label < 0 || label >= cfg.k)
    throw std::invalid_argument("generate_sample: label " + std::to_string(label) +
                                " outside 0.." + std::to_string(cfg.k - 1));
  const int H = cfg.H, W = cfg.W;
  Rng rng(stream_seed(cfg.seed, "sample", sample_seed, static_cast<std::uint64_t>(label)));

  SyntheticSample out;
  out.label = label;
  out.image = Tensor(Shape{3, H, W});
  Tensor& img = out.image;

  // Background: dark base tint, one low-frequency wave, white noise.
  double base[3];
  for (double& b : base) b = rng.uniform(0.08, 0.20);
  const double wave_amp = rng.uniform(0.01, 0.03);
  const double fx = rng.uniform(0.5, 2.5) / W;
  const double fy = rng.uniform(0.5, 2.5) / H;
  const double phase = rng.uniform(0.0, 6.283185307179586);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const double wave = wave_amp * std::sin(6.283185307179586 * (fx * x + fy * y) + phase);
      const double noise = rng.uniform(-cfg.noise_amp, cfg.noise_amp);
      for (int c = 0; c < 3; ++c)
        img[static_cast<long long>(c) * H * W + static_cast<long long>(y) * W + x] =
            std::clamp(base[c] + wave + noise, 0.0, 1.0);
    }
  }

  // Clutter: thin line segments, drawn identically for every label.
  const int n_low = static_cast<int>(std::lround(4.0 * cfg.clutter_density));
  const int n_high = static_cast<int>(std::lround(10.0 * cfg.clutter_density));
  const int n_clutter = n_high > n_low ? n_low + rng.below_int(n_high - n_low + 1) : n_low;
  for (int i = 0; i < n_clutter; ++i) {
    const double cx = rng.uniform(2.0, W - 3.0);
    const double cy = rng.uniform(2.0, H - 3.0);
    const double half_len = rng.uniform(1.5, 4.5);
    const double ang = rng.uniform(0.0, 6.283185307179586);
    const double ax = cx - half_len * std::cos(ang), ay = cy - half_len * std::sin(ang);
    const double bx = cx + half_len * std::cos(ang), by = cy + half_len * std::sin(ang);
    double col[3];
    const double level = rng.uniform(0.30, 0.55);
    for (double& c : col) c = std::clamp(level + rng.uniform(-0.08, 0.08), 0.0, 1.0);
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(ax, bx))) - 1);
    const int x1 = std::min(W - 1, static_cast<int>(std::ceil(std::max(ax, bx))) + 1);
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(ay, by))) - 1);
    const int y1 = std::min(H - 1, static_cast<int>(std::ceil(std::max(ay, by))) + 1);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (detail::dist_to_segment(x + 0.5, y + 0.5, ax, ay, bx, by) <= 0.7)
          for (int c = 0; c < 3; ++c)
            img[static_cast<long long>(c) * H * W + static_cast<long long>(y) * W + x] = col[c];
  }

  // Foreground shape: resample until the rasterized tight box satisfies the
  // area bounds (binary rasterization can shave the analytic extent).
  double col[3];
  col[0] = rng.uniform(0.65, 0.95);
  col[1] = rng.uniform(0.65, 0.95);
  col[2] = rng.uniform(0.65, 0.95);
  const double area_px = static_cast<double>(H) * W;
  for (int attempt = 0;; ++attempt) {
    const double theta = rng.uniform(0.0, 6.283185307179586);
    detail::ShapeGeom geom{label, std::cos(theta), std::sin(theta)};
    const detail::Vec2 ue = geom.unit_extent();
    const double target_box = rng.uniform(cfg.box_frac_min, cfg.box_frac_max) * area_px;
    const double s = std::sqrt(target_box / (4.0 * ue.x * ue.y));
    const double ex = s * ue.x, ey = s * ue.y;
    if (2.0 * ex > W - 4.0 || 2.0 * ey > H - 4.0) continue;
    const double cx = rng.uniform(ex + 1.5, W - 1.5 - ex);
    const double cy = rng.uniform(ey + 1.5, H - 1.5 - ey);

    int bx0 = W, by0 = H, bx1 = -1, by1 = -1;
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(H) * W, 0);
    const int sx0 = std::max(0, static_cast<int>(std::floor(cx - ex)) - 1);
    const int sx1 = std::min(W - 1, static_cast<int>(std::ceil(cx + ex)) + 1);
    const int sy0 = std::max(0, static_cast<int>(std::floor(cy - ey)) - 1);
    const int sy1 = std::min(H - 1, static_cast<int>(std::ceil(cy + ey)) + 1);
    for (int y = sy0; y <= sy1; ++y) {
      for (int x = sx0; x <= sx1; ++x) {
        if (!geom.inside((x + 0.5 - cx) / s, (y + 0.5 - cy) / s)) continue;
        mask[static_cast<std::size_t>(y) * W + x] = 1;
        bx0 = std::min(bx0, x);
        bx1 = std::max(bx1, x);
        by0 = std::min(by0, y);
        by1 = std::max(by1, y);
      }
    }
    if (bx1 < 0) continue;
    const Box box{bx0, by0, bx1 + 1, by1 + 1};
    const double frac = static_cast<double>(box.area()) / area_px;
    if ((frac < 0.04 || frac > 0.60) && attempt < 64) continue;
    if (paint_foreground)
      for (int y = by0; y <= by1; ++y)
        for (int x = bx0; x <= bx1; ++x)
          if (mask[static_cast<std::size_t>(y) * W + x])
            for (int c = 0; c < 3; ++c)
              img[static_cast<long long>(c) * H * W + static_cast<long long>(y) * W + x] = col[c];
    out.gt_box = box;
    break;
  }
  return out;
}

// Balanced split; label for index i is i % k, per-sample seed is the split
// base plus i, so the three splits can never collide.
inline std::vector<SyntheticSample> generate_split(const DataGenConfig& cfg, Split split,
                                                   bool paint_foreground = true) {
  if (cfg.k < 2) throw std::invalid_argument("generate_split: need at least 2 classes");
  const int n = split == Split::train ? cfg.n_train : (split == Split::val ? cfg.n_val : cfg.n_test);
  const std::uint64_t base = detail::split_base(split);
  std::vector<SyntheticSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    out.push_back(
        generate_sample(cfg, i % cfg.k, base + static_cast<std::uint64_t>(i), paint_foreground));
  return out;
}

// Stacks samples [first, first+count) into a [count,3,H,W] batch plus labels.
inline Tensor stack_images(const std::vector<SyntheticSample>& samples,
                           const std::vector<int>& order, std::size_t first, std::size_t count) {
  const Tensor& ref = samples[static_cast<std::size_t>(order[first])].image;
  const long long per = ref.size();
  Tensor batch(Shape{static_cast<int>(count), ref.dim(0), ref.dim(1), ref.dim(2)});
  for (std::size_t i = 0; i < count; ++i) {
    const Tensor& src = samples[static_cast<std::size_t>(order[first + i])].image;
    std::copy(src.data(), src.data() + per, batch.data() + static_cast<long long>(i) * per);
  }
  return batch;
}

// In-place dihedral augmentation of an image batch: each sample draws three
// bits for horizontal flip, vertical flip, and transpose. The transpose bit is
// always drawn for stream stability but only applied to square images. Every
// shape class is closed under these transforms, so labels survive.
inline void augment_batch_d4(Tensor& batch, Rng& rng) {
  if (batch.ndim() != 4)
    throw std::invalid_argument("augment_batch_d4: expected [N,C,H,W], got " +
                                shape_str(batch.shape()));
  const int N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  for (int n = 0; n < N; ++n) {
    const bool hf = rng.bernoulli(0.5);
    const bool vf = rng.bernoulli(0.5);
    const bool tr = rng.bernoulli(0.5);
    for (int c = 0; c < C; ++c) {
      double* plane = batch.data() + (static_cast<long long>(n) * C + c) * H * W;
      if (hf)
        for (int y = 0; y < H; ++y)
          std::reverse(plane + static_cast<long long>(y) * W, plane + static_cast<long long>(y + 1) * W);
      if (vf)
        for (int y = 0; y < H / 2; ++y)
          std::swap_ranges(plane + static_cast<long long>(y) * W,
                           plane + static_cast<long long>(y + 1) * W,
                           plane + static_cast<long long>(H - 1 - y) * W);
      if (tr && H == W)
        for (int y = 0; y < H; ++y)
          for (int x = y + 1; x < W; ++x)
            std::swap(plane[static_cast<long long>(y) * W + x],
                      plane[static_cast<long long>(x) * W + y]);
    }
  }
}

// In-place photometric augmentation: per sample, a global brightness scale
// plus up to two darkened rectangles. Trains a classifier to stay reliable on
// inputs that arrive dimmed or partially suppressed by a soft mask. All draws
// happen unconditionally so the stream layout does not depend on the values.
inline void augment_batch_photometric(Tensor& batch, Rng& rng) {
  if (batch.ndim() != 4)
    throw std::invalid_argument("augment_batch_photometric: expected [N,C,H,W], got " +
                                shape_str(batch.shape()));
  const int N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  for (int n = 0; n < N; ++n) {
    const double scale = rng.uniform(0.35, 1.0);
    const int n_rect = rng.below_int(3);
    int rx[2], ry[2], rw[2], rh[2];
    double rf[2];
    for (int r = 0; r < 2; ++r) {
      rx[r] = rng.below_int(W);
      ry[r] = rng.below_int(H);
      rw[r] = 1 + rng.below_int(std::max(1, 3 * W / 4));
      rh[r] = 1 + rng.below_int(std::max(1, 3 * H / 4));
      rf[r] = rng.uniform(0.0, 0.5);
    }
    for (int c = 0; c < C; ++c) {
      double* plane = batch.data() + (static_cast<long long>(n) * C + c) * H * W;
      for (long long i = 0; i < static_cast<long long>(H) * W; ++i) plane[i] *= scale;
      for (int r = 0; r < n_rect; ++r) {
        const int x1 = std::min(W, rx[r] + rw[r]), y1 = std::min(H, ry[r] + rh[r]);
        for (int y = ry[r]; y < y1; ++y)
          for (int x = rx[r]; x < x1; ++x) plane[static_cast<long long>(y) * W + x] *= rf[r];
      }
    }
  }
}

// --- file export ------------------------------------------------------------

inline void write_ppm(const std::string& path, const Tensor& image) {
  if (image.ndim() != 3 || image.dim(0) != 3)
    throw std::invalid_argument("write_ppm: expected [3,H,W], got " + shape_str(image.shape()));
  const int H = image.dim(1), W = image.dim(2);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
  f << "P6\n" << W << " " << H << "\n255\n";
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = image[static_cast<long long>(c) * H * W + static_cast<long long>(y) * W + x];
        f.put(static_cast<char>(static_cast<int>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)))));
      }
  if (!f) throw std::runtime_error("write_ppm: write failed for " + path);
}

// Grayscale map export, value = round(255*p).
inline void write_pgm(const std::string& path, const Tensor& map) {
  int H, W;
  if (map.ndim() == 2) {
    H = map.dim(0);
    W = map.dim(1);
  } else if (map.ndim() == 4 && map.dim(0) == 1 && map.dim(1) == 1) {
    H = map.dim(2);
    W = map.dim(3);
  } else {
    throw std::invalid_argument("write_pgm: expected [H,W] or [1,1,H,W], got " +
                                shape_str(map.shape()));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_pgm: cannot open " + path);
  f << "P5\n" << W << " " << H << "\n255\n";
  for (long long i = 0; i < static_cast<long long>(H) * W; ++i)
    f.put(static_cast<char>(static_cast<int>(std::lround(255.0 * std::clamp(map[i], 0.0, 1.0)))));
  if (!f) throw std::runtime_error("write_pgm: write failed for " + path);
}

inline void write_annotations_csv(const std::string& path,
                                  const std::vector<SyntheticSample>& samples) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_annotations_csv: cannot open " + path);
  f << "index,label,x_min,y_min,x_max,y_max\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    f << i << "," << s.label << "," << s.gt_box.x_min << "," << s.gt_box.y_min << ","
      << s.gt_box.x_max << "," << s.gt_box.y_max << "\n";
  }
}

}  // namespace actloc
