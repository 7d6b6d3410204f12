#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "actloc/ops.hpp"
#include "actloc/rng.hpp"
#include "actloc/tape.hpp"
#include "actloc/tensor.hpp"

namespace actloc {

struct LossConfig {
  double alpha = 1.5;       // weighted-entropy coefficient
  double beta = 0.02;       // area coefficient
  double mu = 0.5;          // Gaussian weight center
  double sigma = 0.1;       // Gaussian weight width
  double clamp_eps = 1e-12; // log-argument clamp inside the entropy terms
};

struct EraseConfig {
  double tau = 0.6;       // candidate activation threshold
  double drop_prob = 0.5; // per-candidate erase probability
  double frac_min = 0.3;  // rectangle side, as a fraction of the map side
  double frac_max = 0.7;
};

// --- classification ----------------------------------------------------------

// Softmax cross-entropy with natural log, averaged over the batch.
inline Tensor cross_entropy(Tape* tape, const Tensor& logits, const std::vector<int>& labels) {
  Tensor lse = row_logsumexp(tape, logits);
  Tensor truth = gather_rows(tape, logits, labels);
  return mean_all(tape, add(tape, lse, affine(tape, truth, -1.0, 0.0)));
}

// --- activation-map regularizers ----------------------------------------------

// Scalar helpers mirror the tensor paths; tests pin closed-form values on these.
inline double pixel_entropy(double p, double eps = 1e-12) {
  const double q = std::clamp(p, eps, 1.0 - eps);
  return -q * std::log(q) - (1.0 - q) * std::log(1.0 - q);
}

inline double gaussian_weight(double p, double mu, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_weight: sigma must be positive");
  const double d = p - mu;
  return std::exp(-d * d / (2.0 * sigma * sigma));
}

// Per-pixel binary entropy map, same shape as p.
inline Tensor pixel_entropy_map(Tape* tape, const Tensor& p, double eps = 1e-12) {
  Tensor q = clamp(tape, p, eps, 1.0 - eps);
  Tensor r = affine(tape, q, -1.0, 1.0);
  Tensor h = add(tape, mul(tape, q, log(tape, q)), mul(tape, r, log(tape, r)));
  return affine(tape, h, -1.0, 0.0);
}

// Mean per-pixel entropy (the unweighted variant).
inline Tensor entropy_loss(Tape* tape, const Tensor& p, const LossConfig& cfg = {}) {
  return mean_all(tape, pixel_entropy_map(tape, p, cfg.clamp_eps));
}

// gamma = exp(-(p-mu)^2 / (2 sigma^2)), elementwise. With detach, the weight
// is computed from a constant copy of p and gets no gradient of its own.
inline Tensor gaussian_weight_map(Tape* tape, const Tensor& p, const LossConfig& cfg,
                                  bool detach = false) {
  if (!(cfg.sigma > 0.0)) throw std::invalid_argument("gaussian_weight_map: sigma must be positive");
  const Tensor src = detach ? p.detach_copy() : p;
  Tensor d = affine(tape, src, 1.0, -cfg.mu);
  Tensor e = affine(tape, mul(tape, d, d), -1.0 / (2.0 * cfg.sigma * cfg.sigma), 0.0);
  return exp(tape, e);
}

// Mean of gamma * H over all pixels.
inline Tensor weighted_entropy_loss(Tape* tape, const Tensor& p, const LossConfig& cfg = {},
                                    bool detach_gamma = false) {
  Tensor h = pixel_entropy_map(tape, p, cfg.clamp_eps);
  Tensor gamma = gaussian_weight_map(tape, p, cfg, detach_gamma);
  return mean_all(tape, mul(tape, gamma, h));
}

// Mean activation value.
inline Tensor area_loss(Tape* tape, const Tensor& p) { return mean_all(tape, p); }

struct Stage2LossParts {
  Tensor total;
  Tensor evaluation;  // cross-entropy on evaluator logits
  Tensor weighted;    // entropy term actually used (weighted or plain), 0 when off
  Tensor area;        // area term, 0 when off
};

struct Stage2LossFlags {
  bool use_weighted_entropy = true;  // the alpha term
  bool use_area = true;              // the beta term
  bool plain_entropy_instead = false;
  bool detach_gamma = false;
};

// total = L_e + alpha * L_w + beta * L_a, with the flags selecting variants.
inline Stage2LossParts stage2_total_loss(Tape* tape, const Tensor& eval_logits,
                                         const std::vector<int>& labels, const Tensor& p_a,
                                         const LossConfig& cfg = {},
                                         const Stage2LossFlags& flags = {}) {
  Stage2LossParts parts;
  parts.evaluation = cross_entropy(tape, eval_logits, labels);
  parts.total = parts.evaluation;
  if (flags.use_weighted_entropy) {
    parts.weighted = flags.plain_entropy_instead
                         ? entropy_loss(tape, p_a, cfg)
                         : weighted_entropy_loss(tape, p_a, cfg, flags.detach_gamma);
    parts.total = add(tape, parts.total, affine(tape, parts.weighted, cfg.alpha, 0.0));
  } else {
    parts.weighted = Tensor::scalar(0.0);
  }
  if (flags.use_area) {
    parts.area = area_loss(tape, p_a);
    parts.total = add(tape, parts.total, affine(tape, parts.area, cfg.beta, 0.0));
  } else {
    parts.area = Tensor::scalar(0.0);
  }
  return parts;
}

// --- attentive erasing ----------------------------------------------------------

struct EraseRect {
  int row0 = 0, col0 = 0, row1 = 0, col1 = 0;  // half-open
};

// Rectangle centered on the peak activation (first occurrence in row-major
// order on ties). Height is drawn before width; both sides round(frac * dim),
// then the rectangle is clipped to the map.
inline EraseRect peak_rectangle(const Tensor& map, Rng& rng, const EraseConfig& cfg = {}) {
  if (map.ndim() != 2)
    throw std::invalid_argument("peak_rectangle: expected [h,w], got " + shape_str(map.shape()));
  const int h = map.dim(0), w = map.dim(1);
  int peak_r = 0, peak_c = 0;
  double best = map[0];
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      if (map[static_cast<long long>(r) * w + c] > best) {
        best = map[static_cast<long long>(r) * w + c];
        peak_r = r;
        peak_c = c;
      }
  const int rh = std::max<int>(1, static_cast<int>(std::lround(rng.uniform(cfg.frac_min, cfg.frac_max) * h)));
  const int rw = std::max<int>(1, static_cast<int>(std::lround(rng.uniform(cfg.frac_min, cfg.frac_max) * w)));
  EraseRect rect;
  rect.row0 = std::max(0, peak_r - rh / 2);
  rect.col0 = std::max(0, peak_c - rw / 2);
  rect.row1 = std::min(h, peak_r - rh / 2 + rh);
  rect.col1 = std::min(w, peak_c - rw / 2 + rw);
  return rect;
}

// Candidates are pixels strictly above tau inside the rectangle; each is
// dropped independently. One Bernoulli draw per candidate, row-major order.
inline Tensor build_erase_mask(const Tensor& map, const EraseRect& rect, const EraseConfig& cfg,
                               Rng& rng) {
  if (map.ndim() != 2)
    throw std::invalid_argument("build_erase_mask: expected [h,w], got " + shape_str(map.shape()));
  const int h = map.dim(0), w = map.dim(1);
  if (rect.row0 < 0 || rect.col0 < 0 || rect.row1 > h || rect.col1 > w)
    throw std::invalid_argument("build_erase_mask: rectangle outside the map");
  Tensor mask(Shape{h, w}, 1.0);
  for (int r = rect.row0; r < rect.row1; ++r)
    for (int c = rect.col0; c < rect.col1; ++c)
      if (map[static_cast<long long>(r) * w + c] > cfg.tau && rng.bernoulli(cfg.drop_prob))
        mask[static_cast<long long>(r) * w + c] = 0.0;
  return mask;
}

// Pointwise product with a constant mask; erased pixels get zero gradient
// through this path.
inline Tensor apply_erase(Tape* tape, const Tensor& p, const Tensor& mask) {
  if (p.shape() != mask.shape())
    throw std::invalid_argument("apply_erase: map " + shape_str(p.shape()) + " vs mask " +
                                shape_str(mask.shape()));
  return mul(tape, p, mask);
}

// Batch version over p[N,1,h,w]; each sample gets its own derived stream so
// erasure draws are independent of batch composition.
inline Tensor erase_mask_batch(const Tensor& p, const EraseConfig& cfg, std::uint64_t base_seed) {
  if (p.ndim() != 4 || p.dim(1) != 1)
    throw std::invalid_argument("erase_mask_batch: expected [N,1,h,w], got " + shape_str(p.shape()));
  const int N = p.dim(0), h = p.dim(2), w = p.dim(3);
  Tensor mask(Shape{N, 1, h, w}, 1.0);
  const long long plane = static_cast<long long>(h) * w;
  for (int n = 0; n < N; ++n) {
    Tensor view(Shape{h, w});
    std::copy(p.data() + n * plane, p.data() + (n + 1) * plane, view.data());
    Rng rng(stream_seed(base_seed, "sample", static_cast<std::uint64_t>(n)));
    const EraseRect rect = peak_rectangle(view, rng, cfg);
    Tensor m = build_erase_mask(view, rect, cfg, rng);
    std::copy(m.data(), m.data() + plane, mask.data() + n * plane);
  }
  return mask;
}

}  // namespace actloc
