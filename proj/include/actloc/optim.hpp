#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "actloc/tensor.hpp"

namespace actloc {

// lr = lr_min + (lr_init - lr_min) * (1 + cos(pi * step / total)) / 2
inline double cosine_lr(long long step, long long total, double lr_init, double lr_min = 0.0) {
  if (total < 1) throw std::invalid_argument("cosine_lr: total must be positive");
  if (step < 0 || step > total)
    throw std::invalid_argument("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                                std::to_string(total) + "]");
  const double pi = 3.14159265358979323846;
  const double phase = pi * static_cast<double>(step) / static_cast<double>(total);
  return lr_min + (lr_init - lr_min) * (1.0 + std::cos(phase)) / 2.0;
}

// Adam with bias correction and zero weight decay. Holds moment buffers keyed
// by parameter name, so the parameter set must be named uniquely.
class Adam {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit Adam(std::vector<Tensor> params) : params_(std::move(params)) {
    for (const Tensor& p : params_) {
      if (p.name().empty()) throw std::invalid_argument("Adam: parameter without a name");
      if (m_.count(p.name())) throw std::invalid_argument("Adam: duplicate parameter name '" + p.name() + "'");
      m_[p.name()] = std::vector<double>(static_cast<std::size_t>(p.size()), 0.0);
      v_[p.name()] = std::vector<double>(static_cast<std::size_t>(p.size()), 0.0);
    }
  }

  long long step_count() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }

  void step(double lr) {
    if (!(lr > 0.0) && lr != 0.0) throw std::invalid_argument("Adam: lr must be non-negative");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (Tensor& p : params_) {
      if (!p.has_grad())
        throw std::runtime_error("Adam: parameter '" + p.name() + "' has no gradient");
      auto& m = m_[p.name()];
      auto& v = v_[p.name()];
      const auto& g = p.grad();
      for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        const double mh = m[i] / bc1;
        const double vh = v[i] / bc2;
        p[static_cast<long long>(i)] -= lr * mh / (std::sqrt(vh) + eps);
      }
    }
  }

  // Moment buffers exposed for checkpointing.
  std::map<std::string, std::vector<double>>& moment1() { return m_; }
  std::map<std::string, std::vector<double>>& moment2() { return v_; }
  void set_step_count(long long t) { t_ = t; }

 private:
  std::vector<Tensor> params_;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
  long long t_ = 0;
};

}  // namespace actloc
