#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "actloc/ops.hpp"
#include "actloc/rng.hpp"
#include "actloc/tensor.hpp"

namespace actloc {

// Callback over (name, tensor) pairs; used for optimizers and checkpoints.
using TensorVisitor = std::function<void(const std::string&, Tensor&)>;

namespace detail {

inline Tensor he_normal(Shape shape, int fan_in, Rng& rng, const std::string& name) {
  Tensor t = Tensor::param(shape, name);
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (long long i = 0; i < t.size(); ++i) t[i] = sd * rng.normal();
  return t;
}

}  // namespace detail

struct Conv2d {
  int stride = 1;
  int padding = 0;
  Tensor w, b;

  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int ksize, int stride_, int padding_, Rng& rng,
         const std::string& name)
      : stride(stride_),
        padding(padding_),
        w(detail::he_normal(Shape{out_ch, in_ch, ksize, ksize}, in_ch * ksize * ksize, rng,
                            name + ".w")),
        b(Tensor::param(Shape{out_ch}, name + ".b")) {}

  Tensor forward(Tape* tape, const Tensor& x) const { return conv2d(tape, x, w, b, stride, padding); }

  void visit_params(const TensorVisitor& fn) {
    fn(w.name(), w);
    fn(b.name(), b);
  }
};

struct BatchNorm2d {
  double eps = 1e-5;
  double momentum = 0.1;
  Tensor scale, shift;
  Tensor running_mean, running_var;  // state, not parameters

  BatchNorm2d() = default;
  BatchNorm2d(int channels, const std::string& name)
      : scale(Tensor::param(Shape{channels}, name + ".scale")),
        shift(Tensor::param(Shape{channels}, name + ".shift")),
        running_mean(Shape{channels}, 0.0),
        running_var(Shape{channels}, 1.0) {
    for (int c = 0; c < channels; ++c) scale[c] = 1.0;
    running_mean.set_name(name + ".running_mean");
    running_var.set_name(name + ".running_var");
  }

  Tensor forward(Tape* tape, const Tensor& x, BnMode mode) {
    return batchnorm2d(tape, x, scale, shift, eps, mode, &running_mean, &running_var, momentum);
  }

  void visit_params(const TensorVisitor& fn) {
    fn(scale.name(), scale);
    fn(shift.name(), shift);
  }
  void visit_state(const TensorVisitor& fn) {
    fn(running_mean.name(), running_mean);
    fn(running_var.name(), running_var);
  }
};

struct LinearLayer {
  Tensor w, b;

  LinearLayer() = default;
  LinearLayer(int in_features, int out_features, Rng& rng, const std::string& name)
      : w(detail::he_normal(Shape{out_features, in_features}, in_features, rng, name + ".w")),
        b(Tensor::param(Shape{out_features}, name + ".b")) {}

  Tensor forward(Tape* tape, const Tensor& x) const { return linear(tape, x, w, b); }

  void visit_params(const TensorVisitor& fn) {
    fn(w.name(), w);
    fn(b.name(), b);
  }
};

struct ConvBnRelu {
  Conv2d conv;
  BatchNorm2d bn;

  ConvBnRelu() = default;
  ConvBnRelu(int in_ch, int out_ch, int ksize, int stride, int padding, Rng& rng,
             const std::string& name)
      : conv(in_ch, out_ch, ksize, stride, padding, rng, name + ".conv"),
        bn(out_ch, name + ".bn") {}

  Tensor forward(Tape* tape, const Tensor& x, BnMode mode) {
    return relu(tape, bn.forward(tape, conv.forward(tape, x), mode));
  }

  void visit_params(const TensorVisitor& fn) {
    conv.visit_params(fn);
    bn.visit_params(fn);
  }
  void visit_state(const TensorVisitor& fn) { bn.visit_state(fn); }
};

// Symmetric hourglass: `depth` strided conv stages doubling channels on the
// way down, mirrored bilinear-upsample + conv stages on the way back up,
// ending at out_ch. Channel plan for depth 2: c -> 2c -> 4c -> 2c -> out_ch.
// Spatial size is preserved end to end, so (h, w) must divide by 2^depth;
// that is checked here rather than at forward time.
struct EncoderDecoder {
  int depth = 0;
  int in_h = 0, in_w = 0;
  std::vector<ConvBnRelu> enc;
  std::vector<ConvBnRelu> dec;

  EncoderDecoder() = default;
  EncoderDecoder(int in_ch, int out_ch, int depth_, int h, int w, Rng& rng,
                 const std::string& name)
      : depth(depth_), in_h(h), in_w(w) {
    if (depth < 1) throw std::invalid_argument(name + ": depth must be at least 1");
    const int div = 1 << depth;
    if (h % div != 0 || w % div != 0)
      throw std::invalid_argument(name + ": spatial size " + std::to_string(h) + "x" +
                                  std::to_string(w) + " not divisible by " + std::to_string(div));
    int ch = in_ch;
    for (int d = 0; d < depth; ++d) {
      enc.emplace_back(ch, ch * 2, 3, 2, 1, rng, name + ".enc" + std::to_string(d));
      ch *= 2;
    }
    for (int d = 0; d < depth; ++d) {
      const int next = (d + 1 == depth) ? out_ch : ch / 2;
      dec.emplace_back(ch, next, 3, 1, 1, rng, name + ".dec" + std::to_string(d));
      ch = next;
    }
  }

  Tensor forward(Tape* tape, const Tensor& x, BnMode mode) {
    Tensor y = x;
    for (auto& st : enc) y = st.forward(tape, y, mode);
    for (auto& st : dec) {
      y = upsample_bilinear(tape, y, y.dim(2) * 2, y.dim(3) * 2);
      y = st.forward(tape, y, mode);
    }
    return y;
  }

  void visit_params(const TensorVisitor& fn) {
    for (auto& st : enc) st.visit_params(fn);
    for (auto& st : dec) st.visit_params(fn);
  }
  void visit_state(const TensorVisitor& fn) {
    for (auto& st : enc) st.visit_state(fn);
    for (auto& st : dec) st.visit_state(fn);
  }
};

}  // namespace actloc
