#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "actloc/tensor.hpp"

namespace actloc {

// Define-by-run record of primitive applications. A tape is built fresh for
// every forward pass; backprop zero-fills the grad buffers of every touched
// tensor and then walks the records exactly once in reverse creation order,
// so the accumulation order is fixed and results are bit-reproducible.
class Tape {
 public:
  void record(std::function<void()> backward) { nodes_.push_back(std::move(backward)); }

  // Registers a tensor whose grad buffer must exist (zeroed) before the
  // backward walk. Ops call this for their output and for every input that
  // will receive gradient.
  void touch(const std::shared_ptr<TensorImpl>& impl) { touched_.push_back(impl); }

  std::size_t num_nodes() const { return nodes_.size(); }

  void backprop(const Tensor& loss) {
    if (loss.size() != 1)
      throw std::invalid_argument("backprop: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!loss.tracked())
      throw std::invalid_argument("backprop: loss tensor is not recorded on this tape");
    for (const auto& impl : touched_) impl->grad.assign(impl->data.size(), 0.0);
    loss.impl()->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<std::shared_ptr<TensorImpl>> touched_;
};

}  // namespace actloc
