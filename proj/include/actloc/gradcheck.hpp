#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "actloc/tape.hpp"
#include "actloc/tensor.hpp"

namespace actloc {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;  // "param[i]" of the worst element
  bool ok(double tol) const { return max_rel_err <= tol; }
};

// Compares reverse-mode gradients of a scalar-valued function against central
// finite differences, perturbing every element of every listed parameter.
// Relative error uses max(1, |analytic|, |numeric|) as the denominator.
// The function is re-invoked per probe, so it must be a pure map from
// parameter values to a scalar.
inline GradCheckResult finite_difference_check(const std::function<Tensor(Tape&)>& f,
                                               const std::vector<Tensor>& params,
                                               double eps = 1e-5) {
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = f(tape);
    tape.backprop(loss);
    for (const Tensor& p : params) {
      if (!p.has_grad())
        throw std::runtime_error("finite_difference_check: no gradient reached parameter '" +
                                 p.name() + "'");
      analytic.push_back(p.grad());
    }
  }

  auto eval = [&]() {
    Tape tape;
    return f(tape).value();
  };

  GradCheckResult res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    for (long long i = 0; i < p.size(); ++i) {
      const double keep = p[i];
      p[i] = keep + eps;
      const double up = eval();
      p[i] = keep - eps;
      const double dn = eval();
      p[i] = keep;
      const double num = (up - dn) / (2.0 * eps);
      const double ana = analytic[pi][static_cast<std::size_t>(i)];
      const double denom = std::max({1.0, std::fabs(ana), std::fabs(num)});
      const double rel = std::fabs(ana - num) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = (p.name().empty() ? "param" + std::to_string(pi) : p.name()) + "[" +
                    std::to_string(i) + "]";
      }
    }
  }
  return res;
}

}  // namespace actloc
