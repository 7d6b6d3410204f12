#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "actloc/nn.hpp"
#include "actloc/ops.hpp"
#include "actloc/rng.hpp"
#include "actloc/tensor.hpp"

namespace actloc {

struct ModelConfig {
  int k = 5;
  int H = 64;
  int W = 64;
  int c = 16;          // channels of the shallow feature map
  int stem_depth = 2;  // stride-2 stages in the shallow stem; map is H/2^depth
  int gen_depth = 2;   // encoder depth of the hourglass generator
  int eval_depth = 4;  // stride-2 stages in the evaluator

  int map_h() const { return H >> stem_depth; }
  int map_w() const { return W >> stem_depth; }
};

// Classifier + generator assembly.
//
// Parameter groups, disjoint by construction:
//   c1: shallow stem producing f^c
//   d:  hourglass generator f^c -> f^a
//   p1: map head, conv+BN+sigmoid squashing f^a to the single-channel map
//   p2: auxiliary conv head scored by global average pooling
//   c2: deep classifier consuming the masked f^c
class LocalizerModel {
 public:
  struct Stage1Out {
    Tensor p_a;    // [N,1,h,w], values in (0,1)
    Tensor y;      // [N,k] logits from the deep classifier
    Tensor y_aux;  // [N,k] logits from the auxiliary head
    Tensor f_c;    // [N,c,h,w]
  };

  LocalizerModel(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.H % (1 << cfg.stem_depth) != 0 || cfg.W % (1 << cfg.stem_depth) != 0)
      throw std::invalid_argument("LocalizerModel: image size not divisible by stem stride");
    int ch = 3;
    for (int d = 0; d < cfg.stem_depth; ++d) {
      const int next = cfg.c >> (cfg.stem_depth - 1 - d);
      stem_.emplace_back(ch, next, 3, 2, 1, rng, "c1.stage" + std::to_string(d));
      ch = next;
    }
    gen_ = EncoderDecoder(cfg.c, cfg.k, cfg.gen_depth, cfg.map_h(), cfg.map_w(), rng, "d.gen");
    map_conv_ = Conv2d(cfg.k, 1, 3, 1, 1, rng, "p1.conv");
    map_bn_ = BatchNorm2d(1, "p1.bn");
    aux_conv_ = Conv2d(cfg.k, cfg.k, 3, 1, 1, rng, "p2.conv");
    ch = cfg.c;
    for (int d = 0; d < 2; ++d) {
      deep_.emplace_back(ch, ch * 2, 3, 2, 1, rng, "c2.stage" + std::to_string(d));
      ch *= 2;
    }
    head_ = LinearLayer(ch, cfg.k, rng, "c2.head");
  }

  const ModelConfig& config() const { return cfg_; }

  Tensor features(Tape* tape, const Tensor& image, BnMode mode) {
    Tensor y = image;
    for (auto& st : stem_) y = st.forward(tape, y, mode);
    return y;
  }

  // f^c -> single-channel map via the generator and the squashing head.
  Tensor map_from_features(Tape* tape, const Tensor& f_c, BnMode mode) {
    Tensor f_a = gen_.forward(tape, f_c, mode);
    return sigmoid(tape, map_bn_.forward(tape, map_conv_.forward(tape, f_a), mode));
  }

  // map_override replaces p^a on the masking path (bypass testing hook).
  Stage1Out stage1_forward(Tape* tape, const Tensor& image, BnMode mode,
                           const Tensor* map_override = nullptr) {
    Stage1Out out;
    out.f_c = features(tape, image, mode);
    Tensor f_a = gen_.forward(tape, out.f_c, mode);
    out.p_a = sigmoid(tape, map_bn_.forward(tape, map_conv_.forward(tape, f_a), mode));
    out.y_aux = global_avg_pool(tape, aux_conv_.forward(tape, f_a));
    const Tensor& mask = map_override != nullptr ? *map_override : out.p_a;
    Tensor masked = mul(tape, mask, out.f_c);
    Tensor h = masked;
    for (auto& st : deep_) h = st.forward(tape, h, mode);
    out.y = head_.forward(tape, global_avg_pool(tape, h));
    return out;
  }

  // Inference path: stem + generator + map head only.
  Tensor infer_map(Tape* tape, const Tensor& image, BnMode mode) {
    return map_from_features(tape, features(tape, image, mode), mode);
  }

  void visit_params(const TensorVisitor& fn) {
    for (auto& st : stem_) st.visit_params(fn);
    gen_.visit_params(fn);
    map_conv_.visit_params(fn);
    map_bn_.visit_params(fn);
    aux_conv_.visit_params(fn);
    for (auto& st : deep_) st.visit_params(fn);
    head_.visit_params(fn);
  }
  void visit_state(const TensorVisitor& fn) {
    for (auto& st : stem_) st.visit_state(fn);
    gen_.visit_state(fn);
    map_bn_.visit_state(fn);
    for (auto& st : deep_) st.visit_state(fn);
  }

  // Group prefix is everything before the first '.'.
  std::vector<Tensor> group_params(const std::string& group) {
    std::vector<Tensor> out;
    visit_params([&](const std::string& name, Tensor& t) {
      if (name.rfind(group + ".", 0) == 0) out.push_back(t);
    });
    if (out.empty()) throw std::invalid_argument("group_params: unknown group '" + group + "'");
    return out;
  }
  std::vector<Tensor> all_params() {
    std::vector<Tensor> out;
    visit_params([&](const std::string&, Tensor& t) { out.push_back(t); });
    return out;
  }

 private:
  ModelConfig cfg_;
  std::vector<ConvBnRelu> stem_;
  EncoderDecoder gen_;
  Conv2d map_conv_;
  BatchNorm2d map_bn_;
  Conv2d aux_conv_;
  std::vector<ConvBnRelu> deep_;
  LinearLayer head_;
};

// Stand-alone classifier scoring masked images in the second stage.
class EvaluatorModel {
 public:
  EvaluatorModel() = default;
  EvaluatorModel(const ModelConfig& cfg, Rng& rng) {
    if (cfg.H % (1 << cfg.eval_depth) != 0 || cfg.W % (1 << cfg.eval_depth) != 0)
      throw std::invalid_argument("EvaluatorModel: image size not divisible by its stride");
    int ch = 3;
    for (int d = 0; d < cfg.eval_depth; ++d) {
      const int next = 16 << d;
      stages_.emplace_back(ch, next, 3, 2, 1, rng, "e.stage" + std::to_string(d));
      ch = next;
    }
    head_ = LinearLayer(ch, cfg.k, rng, "e.head");
  }

  Tensor forward(Tape* tape, const Tensor& image, BnMode mode) {
    Tensor y = image;
    for (auto& st : stages_) y = st.forward(tape, y, mode);
    return head_.forward(tape, global_avg_pool(tape, y));
  }

  // Marks every parameter as frozen; gradients are never allocated for them.
  void freeze() {
    visit_params([](const std::string&, Tensor& t) { t.set_requires_grad(false); });
  }

  void visit_params(const TensorVisitor& fn) {
    for (auto& st : stages_) st.visit_params(fn);
    head_.visit_params(fn);
  }
  void visit_state(const TensorVisitor& fn) {
    for (auto& st : stages_) st.visit_state(fn);
  }
  std::vector<Tensor> all_params() {
    std::vector<Tensor> out;
    visit_params([&](const std::string&, Tensor& t) { out.push_back(t); });
    return out;
  }

 private:
  std::vector<ConvBnRelu> stages_;
  LinearLayer head_;
};

struct Stage2Out {
  Tensor p_a;     // un-erased map, used by the entropy and area penalties
  Tensor p_up;    // full-resolution mask actually applied to the image
  Tensor masked;  // I * p_up
  Tensor y;       // evaluator logits
};

// Masking and scoring on top of an already-computed map. Split out so the
// trainer can build the erase mask from the very map the current forward
// produced, then keep extending the same graph.
inline Stage2Out stage2_from_map(Tape* tape, EvaluatorModel& evaluator, const Tensor& image,
                                 const Tensor& p_a, const Tensor* erase_mask = nullptr) {
  Stage2Out out;
  out.p_a = p_a;
  Tensor eval_map = p_a;
  if (erase_mask != nullptr) eval_map = mul(tape, p_a, *erase_mask);
  out.p_up = upsample_bilinear(tape, eval_map, image.dim(2), image.dim(3));
  out.masked = mul(tape, out.p_up, image);
  out.y = evaluator.forward(tape, out.masked, BnMode::eval);
  return out;
}

// Second-stage forward: the erased map (when given) feeds only the evaluator
// path; the returned p_a stays un-erased for the regularizers. The evaluator
// always runs on its pretrained running statistics; gradients still flow
// through it into the mask, they are just never written to its parameters.
inline Stage2Out stage2_forward(Tape* tape, LocalizerModel& model, EvaluatorModel& evaluator,
                                const Tensor& image, BnMode mode,
                                const Tensor* erase_mask = nullptr) {
  if (erase_mask != nullptr && mode == BnMode::eval)
    throw std::invalid_argument("stage2_forward: erasing is a training-only operation");
  return stage2_from_map(tape, evaluator, image, model.infer_map(tape, image, mode), erase_mask);
}

}  // namespace actloc
