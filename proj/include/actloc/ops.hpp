#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "actloc/tape.hpp"
#include "actloc/tensor.hpp"

namespace actloc {

// Per-kind invocation counters; used by structural tests (e.g. checking that
// the inference path never touches the deep classifier or the evaluator).
struct OpCounters {
  long long conv2d = 0;
  long long batchnorm = 0;
  long long linear = 0;
  long long upsample = 0;
  long long pointwise = 0;
  long long reduce = 0;
  void reset() { *this = OpCounters{}; }
};

inline OpCounters& op_counters() {
  static OpCounters counters;
  return counters;
}

inline bool want_grad(const Tensor& t) {
  return t.tracked() || (t.is_param() && t.requires_grad());
}

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(int M, int K, int N, const double* __restrict a, const double* __restrict b,
                    double* __restrict c) {
  for (int i = 0; i < M; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * K;
    double* crow = c + static_cast<std::size_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      const double av = arow[k];
      const double* brow = b + static_cast<std::size_t>(k) * N;
      for (int j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void gemm_nt(int M, int K, int N, const double* __restrict a, const double* __restrict b,
                    double* __restrict c) {
  for (int i = 0; i < M; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * K;
    double* crow = c + static_cast<std::size_t>(i) * N;
    for (int j = 0; j < N; ++j) {
      const double* brow = b + static_cast<std::size_t>(j) * K;
      double acc = 0.0;
      for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
      crow[j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
inline void gemm_tn(int M, int K, int N, const double* __restrict a, const double* __restrict b,
                    double* __restrict c) {
  for (int k = 0; k < K; ++k) {
    const double* arow = a + static_cast<std::size_t>(k) * M;
    const double* brow = b + static_cast<std::size_t>(k) * N;
    for (int i = 0; i < M; ++i) {
      const double av = arow[i];
      double* crow = c + static_cast<std::size_t>(i) * N;
      for (int j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
  }
}

// Unrolls one sample's [C,H,W] into a [C*kh*kw, OH*OW] column matrix.
inline void im2col(const double* x, int C, int H, int W, int kh, int kw, int stride, int pad,
                   int OH, int OW, double* col) {
  for (int c = 0; c < C; ++c) {
    const double* plane = x + static_cast<std::size_t>(c) * H * W;
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        double* row = col + static_cast<std::size_t>((c * kh + i) * kw + j) * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
          const int iy = oy * stride - pad + i;
          double* out = row + static_cast<std::size_t>(oy) * OW;
          if (iy < 0 || iy >= H) {
            std::fill(out, out + OW, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * W;
          for (int ox = 0; ox < OW; ++ox) {
            const int ix = ox * stride - pad + j;
            out[ox] = (ix >= 0 && ix < W) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

// Scatter-add of a column-matrix gradient back onto the input plane.
inline void col2im_add(const double* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                       int OH, int OW, double* dx) {
  for (int c = 0; c < C; ++c) {
    double* plane = dx + static_cast<std::size_t>(c) * H * W;
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        const double* row = col + static_cast<std::size_t>((c * kh + i) * kw + j) * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
          const int iy = oy * stride - pad + i;
          if (iy < 0 || iy >= H) continue;
          const double* src = row + static_cast<std::size_t>(oy) * OW;
          double* dst = plane + static_cast<std::size_t>(iy) * W;
          for (int ox = 0; ox < OW; ++ox) {
            const int ix = ox * stride - pad + j;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

inline void check_rank4(const Tensor& t, const char* who) {
  if (t.ndim() != 4)
    throw std::invalid_argument(std::string(who) + ": expected a rank-4 tensor, got shape " + shape_str(t.shape()));
}

}  // namespace detail

// --- convolution -----------------------------------------------------------

// Cross-correlation of x[N,C,H,W] with w[O,C,kh,kw] plus bias[O].
inline Tensor conv2d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                     int padding) {
  detail::check_rank4(x, "conv2d input");
  detail::check_rank4(w, "conv2d weight");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be positive");
  if (padding < 0) throw std::invalid_argument("conv2d: padding must be non-negative");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != C)
    throw std::invalid_argument("conv2d: channel mismatch between input " + shape_str(x.shape()) +
                                " and weight " + shape_str(w.shape()));
  if (b.ndim() != 1 || b.dim(0) != O)
    throw std::invalid_argument("conv2d: bias " + shape_str(b.shape()) + " does not match weight " +
                                shape_str(w.shape()));
  if (H + 2 * padding < kh || W + 2 * padding < kw)
    throw std::invalid_argument("conv2d: kernel " + shape_str(w.shape()) +
                                " larger than padded input " + shape_str(x.shape()));
  const int OH = (H + 2 * padding - kh) / stride + 1;
  const int OW = (W + 2 * padding - kw) / stride + 1;
  const int K = C * kh * kw;
  const std::size_t col_sz = static_cast<std::size_t>(K) * OH * OW;

  ++op_counters().conv2d;
  Tensor out(Shape{N, O, OH, OW});
  auto col = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N) * col_sz);
  for (int n = 0; n < N; ++n) {
    double* cn = col->data() + static_cast<std::size_t>(n) * col_sz;
    detail::im2col(x.data() + static_cast<std::size_t>(n) * C * H * W, C, H, W, kh, kw, stride,
                   padding, OH, OW, cn);
    double* on = out.data() + static_cast<std::size_t>(n) * O * OH * OW;
    for (int o = 0; o < O; ++o)
      std::fill(on + static_cast<std::size_t>(o) * OH * OW,
                on + static_cast<std::size_t>(o + 1) * OH * OW, b[o]);
    detail::gemm_nn(O, K, OH * OW, w.data(), cn, on);
  }

  const bool gx = want_grad(x), gw = want_grad(w), gb = want_grad(b);
  if (tape && (gx || gw || gb)) {
    out.mark_tracked();
    tape->touch(out.impl());
    if (gx) tape->touch(x.impl());
    if (gw) tape->touch(w.impl());
    if (gb) tape->touch(b.impl());
    auto xi = x.impl(), wi = w.impl(), bi = b.impl(), oi = out.impl();
    tape->record([=]() {
      const double* go = oi->grad.data();
      std::vector<double> dcol;
      if (gx) dcol.resize(col_sz);
      for (int n = 0; n < N; ++n) {
        const double* gon = go + static_cast<std::size_t>(n) * O * OH * OW;
        const double* cn = col->data() + static_cast<std::size_t>(n) * col_sz;
        if (gw) detail::gemm_nt(O, OH * OW, K, gon, cn, wi->grad.data());
        if (gb) {
          for (int o = 0; o < O; ++o) {
            double acc = 0.0;
            const double* p = gon + static_cast<std::size_t>(o) * OH * OW;
            for (int s = 0; s < OH * OW; ++s) acc += p[s];
            bi->grad[static_cast<std::size_t>(o)] += acc;
          }
        }
        if (gx) {
          std::fill(dcol.begin(), dcol.end(), 0.0);
          detail::gemm_tn(K, O, OH * OW, wi->data.data(), gon, dcol.data());
          detail::col2im_add(dcol.data(), C, H, W, kh, kw, stride, padding, OH, OW,
                             xi->grad.data() + static_cast<std::size_t>(n) * C * H * W);
        }
      }
    });
  }
  return out;
}

// --- batch normalization ----------------------------------------------------

enum class BnMode { train, eval };

// Normalizes x[N,C,H,W] per channel. Train mode uses batch statistics over
// (N,H,W) and, when running buffers are given, folds them in with `momentum`
// (running variance stored unbiased). Eval mode applies the running stats.
inline Tensor batchnorm2d(Tape* tape, const Tensor& x, const Tensor& scale, const Tensor& shift,
                          double eps, BnMode mode, Tensor* running_mean, Tensor* running_var,
                          double momentum = 0.1) {
  detail::check_rank4(x, "batchnorm2d input");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (scale.ndim() != 1 || scale.dim(0) != C || shift.ndim() != 1 || shift.dim(0) != C)
    throw std::invalid_argument("batchnorm2d: scale " + shape_str(scale.shape()) + " / shift " +
                                shape_str(shift.shape()) + " do not match input " +
                                shape_str(x.shape()));
  if (!(eps > 0.0)) throw std::invalid_argument("batchnorm2d: eps must be positive");
  if (mode == BnMode::eval && (running_mean == nullptr || running_var == nullptr))
    throw std::invalid_argument("batchnorm2d: eval mode requires running statistics");

  ++op_counters().batchnorm;
  const long long per_ch = static_cast<long long>(N) * H * W;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::vector<double> mean(C), istd(C);
  if (mode == BnMode::train) {
    for (int c = 0; c < C; ++c) {
      double m = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* p = x.data() + (static_cast<std::size_t>(n) * C + c) * plane;
        for (std::size_t s = 0; s < plane; ++s) m += p[s];
      }
      m /= static_cast<double>(per_ch);
      double v = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* p = x.data() + (static_cast<std::size_t>(n) * C + c) * plane;
        for (std::size_t s = 0; s < plane; ++s) {
          const double d = p[s] - m;
          v += d * d;
        }
      }
      v /= static_cast<double>(per_ch);
      mean[static_cast<std::size_t>(c)] = m;
      istd[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(v + eps);
      if (running_mean != nullptr && running_var != nullptr) {
        const double unbiased = per_ch > 1 ? v * static_cast<double>(per_ch) / static_cast<double>(per_ch - 1) : v;
        (*running_mean)[c] = (1.0 - momentum) * (*running_mean)[c] + momentum * m;
        (*running_var)[c] = (1.0 - momentum) * (*running_var)[c] + momentum * unbiased;
      }
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[static_cast<std::size_t>(c)] = (*running_mean)[c];
      istd[static_cast<std::size_t>(c)] = 1.0 / std::sqrt((*running_var)[c] + eps);
    }
  }

  Tensor out(Shape{N, C, H, W});
  auto xhat = std::make_shared<std::vector<double>>(x.vec().size());
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
      const double m = mean[static_cast<std::size_t>(c)];
      const double is = istd[static_cast<std::size_t>(c)];
      const double g = scale[c], sh = shift[c];
      const double* px = x.data() + base;
      double* ph = xhat->data() + base;
      double* po = out.data() + base;
      for (std::size_t s = 0; s < plane; ++s) {
        const double h = (px[s] - m) * is;
        ph[s] = h;
        po[s] = g * h + sh;
      }
    }
  }

  const bool gx = want_grad(x), gs = want_grad(scale), gh = want_grad(shift);
  if (tape && (gx || gs || gh)) {
    out.mark_tracked();
    tape->touch(out.impl());
    if (gx) tape->touch(x.impl());
    if (gs) tape->touch(scale.impl());
    if (gh) tape->touch(shift.impl());
    auto xi = x.impl(), si = scale.impl(), hi = shift.impl(), oi = out.impl();
    const bool train = mode == BnMode::train;
    tape->record([=]() {
      const double* go = oi->grad.data();
      for (int c = 0; c < C; ++c) {
        const double is = istd[static_cast<std::size_t>(c)];
        const double g = si->data[static_cast<std::size_t>(c)];
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int n = 0; n < N; ++n) {
          const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
          const double* pg = go + base;
          const double* ph = xhat->data() + base;
          for (std::size_t s = 0; s < plane; ++s) {
            sum_dy += pg[s];
            sum_dy_xhat += pg[s] * ph[s];
          }
        }
        if (gs) si->grad[static_cast<std::size_t>(c)] += sum_dy_xhat;
        if (gh) hi->grad[static_cast<std::size_t>(c)] += sum_dy;
        if (gx) {
          const double inv_n = 1.0 / static_cast<double>(per_ch);
          for (int n = 0; n < N; ++n) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
            const double* pg = go + base;
            const double* ph = xhat->data() + base;
            double* pd = xi->grad.data() + base;
            if (train) {
              for (std::size_t s = 0; s < plane; ++s)
                pd[s] += g * is * (pg[s] - inv_n * sum_dy - ph[s] * inv_n * sum_dy_xhat);
            } else {
              for (std::size_t s = 0; s < plane; ++s) pd[s] += g * is * pg[s];
            }
          }
        }
      }
    });
  }
  return out;
}

// --- pointwise primitives ----------------------------------------------------

namespace detail {

template <typename Fwd, typename Bwd>
Tensor pointwise_unary(Tape* tape, const Tensor& x, Fwd&& fwd, Bwd&& bwd_factory) {
  ++op_counters().pointwise;
  Tensor out(x.shape());
  const long long n = x.size();
  for (long long i = 0; i < n; ++i) out[i] = fwd(x[i]);
  if (tape && want_grad(x)) {
    out.mark_tracked();
    tape->touch(out.impl());
    tape->touch(x.impl());
    tape->record(bwd_factory(x.impl(), out.impl()));
  }
  return out;
}

}  // namespace detail

inline Tensor relu(Tape* tape, const Tensor& x) {
  return detail::pointwise_unary(
      tape, x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](std::shared_ptr<TensorImpl> xi, std::shared_ptr<TensorImpl> oi) {
        return [=]() {
          for (std::size_t i = 0; i < xi->data.size(); ++i)
            if (xi->data[i] > 0.0) xi->grad[i] += oi->grad[i];
        };
      });
}

inline Tensor sigmoid(Tape* tape, const Tensor& x) {
  // Saturated outputs are nudged into the open interval so the map contract
  // p in (0,1) holds even for extreme pre-activations.
  auto stable = [](double v) {
    double y;
    if (v >= 0.0) {
      y = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      y = e / (1.0 + e);
    }
    if (y >= 1.0) return std::nextafter(1.0, 0.0);
    if (y <= 0.0) return std::numeric_limits<double>::denorm_min();
    return y;
  };
  return detail::pointwise_unary(
      tape, x, stable,
      [](std::shared_ptr<TensorImpl> xi, std::shared_ptr<TensorImpl> oi) {
        return [=]() {
          for (std::size_t i = 0; i < xi->data.size(); ++i) {
            const double y = oi->data[i];
            xi->grad[i] += oi->grad[i] * y * (1.0 - y);
          }
        };
      });
}

// Natural log; callers are responsible for keeping inputs positive (losses
// clamp first, primitives never do).
inline Tensor log(Tape* tape, const Tensor& x) {
  return detail::pointwise_unary(
      tape, x, [](double v) { return std::log(v); },
      [](std::shared_ptr<TensorImpl> xi, std::shared_ptr<TensorImpl> oi) {
        return [=]() {
          for (std::size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += oi->grad[i] / xi->data[i];
        };
      });
}

inline Tensor exp(Tape* tape, const Tensor& x) {
  return detail::pointwise_unary(
      tape, x, [](double v) { return std::exp(v); },
      [](std::shared_ptr<TensorImpl> xi, std::shared_ptr<TensorImpl> oi) {
        return [=]() {
          for (std::size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += oi->grad[i] * oi->data[i];
        };
      });
}

// Clamps into [lo,hi]; gradient passes only where the input was inside.
inline Tensor clamp(Tape* tape, const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  return detail::pointwise_unary(
      tape, x, [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](std::shared_ptr<TensorImpl> xi, std::shared_ptr<TensorImpl> oi) {
        return [=]() {
          for (std::size_t i = 0; i < xi->data.size(); ++i)
            if (xi->data[i] >= lo && xi->data[i] <= hi) xi->grad[i] += oi->grad[i];
        };
      });
}

// y = a*x + b, elementwise
inline Tensor affine(Tape* tape, const Tensor& x, double a, double b) {
  ++op_counters().pointwise;
  Tensor out(x.shape());
  const long long n = x.size();
  for (long long i = 0; i < n; ++i) out[i] = a * x[i] + b;
  if (tape && want_grad(x)) {
    out.mark_tracked();
    tape->touch(out.impl());
    tape->touch(x.impl());
    auto xi = x.impl(), oi = out.impl();
    tape->record([=]() {
      for (std::size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += a * oi->grad[i];
    });
  }
  return out;
}

inline Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  ++op_counters().pointwise;
  Tensor out(a.shape());
  const long long n = a.size();
  for (long long i = 0; i < n; ++i) out[i] = a[i] + b[i];
  const bool ga = want_grad(a), gb = want_grad(b);
  if (tape && (ga || gb)) {
    out.mark_tracked();
    tape->touch(out.impl());
    if (ga) tape->touch(a.impl());
    if (gb) tape->touch(b.impl());
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    tape->record([=]() {
      for (std::size_t i = 0; i < oi->grad.size(); ++i) {
        if (ga) ai->grad[i] += oi->grad[i];
        if (gb) bi->grad[i] += oi->grad[i];
      }
    });
  }
  return out;
}

// Pointwise product. Accepts identical shapes, or a single-channel map
// [N,1,H,W] against features [N,C,H,W] (in either argument order), which is
// the map-masking pattern.
inline Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  bool a_is_map = false, b_is_map = false;
  if (!same) {
    auto map_against = [](const Tensor& m, const Tensor& f) {
      return m.ndim() == 4 && f.ndim() == 4 && m.dim(0) == f.dim(0) && m.dim(1) == 1 &&
             m.dim(2) == f.dim(2) && m.dim(3) == f.dim(3);
    };
    a_is_map = map_against(a, b);
    b_is_map = map_against(b, a);
    if (!a_is_map && !b_is_map)
      throw std::invalid_argument("mul: shapes " + shape_str(a.shape()) + " and " +
                                  shape_str(b.shape()) +
                                  " are neither identical nor a [N,1,H,W] broadcast");
  }
  ++op_counters().pointwise;
  const Tensor& map = a_is_map ? a : b;
  const Tensor& feat = a_is_map ? b : a;

  Tensor out(same ? a.shape() : feat.shape());
  if (same) {
    const long long n = a.size();
    for (long long i = 0; i < n; ++i) out[i] = a[i] * b[i];
  } else {
    const int N = feat.dim(0), C = feat.dim(1);
    const std::size_t plane = static_cast<std::size_t>(feat.dim(2)) * feat.dim(3);
    for (int n = 0; n < N; ++n) {
      const double* pm = map.data() + static_cast<std::size_t>(n) * plane;
      for (int c = 0; c < C; ++c) {
        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
        const double* pf = feat.data() + base;
        double* po = out.data() + base;
        for (std::size_t s = 0; s < plane; ++s) po[s] = pm[s] * pf[s];
      }
    }
  }

  const bool ga = want_grad(a), gb = want_grad(b);
  if (tape && (ga || gb)) {
    out.mark_tracked();
    tape->touch(out.impl());
    if (ga) tape->touch(a.impl());
    if (gb) tape->touch(b.impl());
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    if (same) {
      tape->record([=]() {
        for (std::size_t i = 0; i < oi->grad.size(); ++i) {
          if (ga) ai->grad[i] += oi->grad[i] * bi->data[i];
          if (gb) bi->grad[i] += oi->grad[i] * ai->data[i];
        }
      });
    } else {
      auto mi = a_is_map ? ai : bi;
      auto fi = a_is_map ? bi : ai;
      const bool gm = a_is_map ? ga : gb;
      const bool gf = a_is_map ? gb : ga;
      const int N = feat.dim(0), C = feat.dim(1);
      const std::size_t plane = static_cast<std::size_t>(feat.dim(2)) * feat.dim(3);
      tape->record([=]() {
        for (int n = 0; n < N; ++n) {
          const std::size_t mbase = static_cast<std::size_t>(n) * plane;
          for (int c = 0; c < C; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
            const double* pg = oi->grad.data() + base;
            for (std::size_t s = 0; s < plane; ++s) {
              if (gm) mi->grad[mbase + s] += pg[s] * fi->data[base + s];
              if (gf) fi->grad[base + s] += pg[s] * mi->data[mbase + s];
            }
          }
        }
      });
    }
  }
  return out;
}

// --- reductions ---------------------------------------------------------------

inline Tensor sum_all(Tape* tape, const Tensor& x) {
  ++op_counters().reduce;
  double acc = 0.0;
  const long long n = x.size();
  for (long long i = 0; i < n; ++i) acc += x[i];
  Tensor out = Tensor::scalar(acc);
  if (tape && want_grad(x)) {
    out.mark_tracked();
    tape->touch(out.impl());
    tape->touch(x.impl());
    auto xi = x.impl(), oi = out.impl();
    tape->record([=]() {
      const double g = oi->grad[0];
      for (std::size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += g;
    });
  }
  return out;
}

inline Tensor mean_all(Tape* tape, const Tensor& x) {
  ++op_counters().reduce;
  double acc = 0.0;
  const long long n = x.size();
  for (long long i = 0; i < n; ++i) acc += x[i];
  Tensor out = Tensor::scalar(acc / static_cast<double>(n));
  if (tape && want_grad(x)) {
    out.mark_tracked();
    tape->touch(out.impl());
    tape->touch(x.impl());
    auto xi = x.impl(), oi = out.impl();
    const double inv = 1.0 / static_cast<double>(n);
    tape->record([=]() {
      const double g = oi->grad[0] * inv;
      for (std::size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += g;
    });
  }
  return out;
}

// Spatial mean per channel: [N,C,H,W] -> [N,C]
inline Tensor global_avg_pool(Tape* tape, const Tensor& x) {
  detail::check_rank4(x, "global_avg_pool");
  ++op_counters().reduce;
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor out(Shape{N, C});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const double* p = x.data() + (static_cast<std::size_t>(n) * C + c) * plane;
      double acc = 0.0;
      for (std::size_t s = 0; s < plane; ++s) acc += p[s];
      out[static_cast<long long>(n) * C + c] = acc / static_cast<double>(plane);
    }
  }
  if (tape && want_grad(x)) {
    out.mark_tracked();
    tape->touch(out.impl());
    tape->touch(x.impl());
    auto xi = x.impl(), oi = out.impl();
    const double inv = 1.0 / static_cast<double>(plane);
    tape->record([=]() {
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
          const double g = oi->grad[static_cast<std::size_t>(n) * C + c] * inv;
          double* pd = xi->grad.data() + (static_cast<std::size_t>(n) * C + c) * plane;
          for (std::size_t s = 0; s < plane; ++s) pd[s] += g;
        }
      }
    });
  }
  return out;
}

// --- bilinear upsampling --------------------------------------------------------

// Aligned-corner bilinear interpolation of [N,C,h,w] up to [N,C,outH,outW].
inline Tensor upsample_bilinear(Tape* tape, const Tensor& x, int outH, int outW) {
  detail::check_rank4(x, "upsample_bilinear");
  const int N = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (outH < h || outW < w)
    throw std::invalid_argument("upsample_bilinear: target " + std::to_string(outH) + "x" +
                                std::to_string(outW) + " below input " + shape_str(x.shape()));
  ++op_counters().upsample;

  struct Tap {
    int lo, hi;
    double f;
  };
  auto taps = [](int in, int out) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    const double scale = (out > 1 && in > 1) ? static_cast<double>(in - 1) / (out - 1) : 0.0;
    for (int i = 0; i < out; ++i) {
      const double src = scale * i;
      int lo = static_cast<int>(src);
      if (lo > in - 2) lo = in > 1 ? in - 2 : 0;
      const int hi = in > 1 ? lo + 1 : 0;
      t[static_cast<std::size_t>(i)] = {lo, hi, src - lo};
    }
    return t;
  };
  const auto ty = taps(h, outH);
  const auto tx = taps(w, outW);

  Tensor out(Shape{N, C, outH, outW});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const double* src = x.data() + (static_cast<std::size_t>(n) * C + c) * h * w;
      double* dst = out.data() + (static_cast<std::size_t>(n) * C + c) * outH * outW;
      for (int oy = 0; oy < outH; ++oy) {
        const Tap& yy = ty[static_cast<std::size_t>(oy)];
        const double* r0 = src + static_cast<std::size_t>(yy.lo) * w;
        const double* r1 = src + static_cast<std::size_t>(yy.hi) * w;
        double* orow = dst + static_cast<std::size_t>(oy) * outW;
        for (int ox = 0; ox < outW; ++ox) {
          const Tap& xxt = tx[static_cast<std::size_t>(ox)];
          const double top = r0[xxt.lo] * (1.0 - xxt.f) + r0[xxt.hi] * xxt.f;
          const double bot = r1[xxt.lo] * (1.0 - xxt.f) + r1[xxt.hi] * xxt.f;
          orow[ox] = top * (1.0 - yy.f) + bot * yy.f;
        }
      }
    }
  }

  if (tape && want_grad(x)) {
    out.mark_tracked();
    tape->touch(out.impl());
    tape->touch(x.impl());
    auto xi = x.impl(), oi = out.impl();
    tape->record([=]() {
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
          double* dsrc = xi->grad.data() + (static_cast<std::size_t>(n) * C + c) * h * w;
          const double* dyp = oi->grad.data() + (static_cast<std::size_t>(n) * C + c) * outH * outW;
          for (int oy = 0; oy < outH; ++oy) {
            const Tap& yy = ty[static_cast<std::size_t>(oy)];
            for (int ox = 0; ox < outW; ++ox) {
              const Tap& xxt = tx[static_cast<std::size_t>(ox)];
              const double g = dyp[static_cast<std::size_t>(oy) * outW + ox];
              dsrc[static_cast<std::size_t>(yy.lo) * w + xxt.lo] += g * (1.0 - yy.f) * (1.0 - xxt.f);
              dsrc[static_cast<std::size_t>(yy.lo) * w + xxt.hi] += g * (1.0 - yy.f) * xxt.f;
              dsrc[static_cast<std::size_t>(yy.hi) * w + xxt.lo] += g * yy.f * (1.0 - xxt.f);
              dsrc[static_cast<std::size_t>(yy.hi) * w + xxt.hi] += g * yy.f * xxt.f;
            }
          }
        }
      }
    });
  }
  return out;
}

// --- fully connected --------------------------------------------------------------

// y[n,o] = sum_i x[n,i] * w[o,i] + b[o]
inline Tensor linear(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(1))
    throw std::invalid_argument("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                                shape_str(w.shape()));
  const int N = x.dim(0), I = x.dim(1), O = w.dim(0);
  if (b.ndim() != 1 || b.dim(0) != O)
    throw std::invalid_argument("linear: bias " + shape_str(b.shape()) + " does not match weight " +
                                shape_str(w.shape()));
  ++op_counters().linear;
  Tensor out(Shape{N, O});
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o) out[static_cast<long long>(n) * O + o] = b[o];
  detail::gemm_nt(N, I, O, x.data(), w.data(), out.data());

  const bool gx = want_grad(x), gw = want_grad(w), gb = want_grad(b);
  if (tape && (gx || gw || gb)) {
    out.mark_tracked();
    tape->touch(out.impl());
    if (gx) tape->touch(x.impl());
    if (gw) tape->touch(w.impl());
    if (gb) tape->touch(b.impl());
    auto xi = x.impl(), wi = w.impl(), bi = b.impl(), oi = out.impl();
    tape->record([=]() {
      const double* go = oi->grad.data();
      if (gx) detail::gemm_nn(N, O, I, go, wi->data.data(), xi->grad.data());
      if (gw) detail::gemm_tn(O, N, I, go, xi->data.data(), wi->grad.data());
      if (gb) {
        for (int n = 0; n < N; ++n)
          for (int o = 0; o < O; ++o) bi->grad[static_cast<std::size_t>(o)] += go[static_cast<std::size_t>(n) * O + o];
      }
    });
  }
  return out;
}

// Picks one column per row: [N,K] with idx[n] -> [N].
inline Tensor gather_rows(Tape* tape, const Tensor& x, const std::vector<int>& idx) {
  if (x.ndim() != 2)
    throw std::invalid_argument("gather_rows: expected [N,K], got " + shape_str(x.shape()));
  const int N = x.dim(0), K = x.dim(1);
  if (static_cast<int>(idx.size()) != N)
    throw std::invalid_argument("gather_rows: index count " + std::to_string(idx.size()) +
                                " does not match rows " + std::to_string(N));
  for (int i : idx)
    if (i < 0 || i >= K) throw std::invalid_argument("gather_rows: index " + std::to_string(i) + " out of range");
  ++op_counters().pointwise;
  Tensor out(Shape{N});
  for (int n = 0; n < N; ++n) out[n] = x[static_cast<long long>(n) * K + idx[static_cast<std::size_t>(n)]];
  if (tape && want_grad(x)) {
    out.mark_tracked();
    tape->touch(out.impl());
    tape->touch(x.impl());
    auto xi = x.impl(), oi = out.impl();
    tape->record([=]() {
      for (int n = 0; n < N; ++n)
        xi->grad[static_cast<std::size_t>(n) * K + static_cast<std::size_t>(idx[static_cast<std::size_t>(n)])] +=
            oi->grad[static_cast<std::size_t>(n)];
    });
  }
  return out;
}

// --- row-wise log-sum-exp -----------------------------------------------------------

// [N,K] -> [N]; stabilized by the row maximum. Backward is the softmax.
inline Tensor row_logsumexp(Tape* tape, const Tensor& x) {
  if (x.ndim() != 2)
    throw std::invalid_argument("row_logsumexp: expected [N,K], got " + shape_str(x.shape()));
  ++op_counters().reduce;
  const int N = x.dim(0), K = x.dim(1);
  Tensor out(Shape{N});
  auto softmax = std::make_shared<std::vector<double>>(x.vec().size());
  for (int n = 0; n < N; ++n) {
    const double* row = x.data() + static_cast<std::size_t>(n) * K;
    double m = row[0];
    for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
    double z = 0.0;
    double* sm = softmax->data() + static_cast<std::size_t>(n) * K;
    for (int k = 0; k < K; ++k) {
      sm[k] = std::exp(row[k] - m);
      z += sm[k];
    }
    out[n] = m + std::log(z);
    for (int k = 0; k < K; ++k) sm[k] /= z;
  }
  if (tape && want_grad(x)) {
    out.mark_tracked();
    tape->touch(out.impl());
    tape->touch(x.impl());
    auto xi = x.impl(), oi = out.impl();
    tape->record([=]() {
      for (int n = 0; n < N; ++n) {
        const double g = oi->grad[static_cast<std::size_t>(n)];
        const double* sm = softmax->data() + static_cast<std::size_t>(n) * K;
        double* gd = xi->grad.data() + static_cast<std::size_t>(n) * K;
        for (int k = 0; k < K; ++k) gd[k] += g * sm[k];
      }
    });
  }
  return out;
}

}  // namespace actloc
