#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dynasty/tensor.hpp"

namespace dynasty {

struct ParamCheck {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  bool passed() const;
  double max_rel_error() const;
};

// Compares reverse-mode gradients of build() against central differences.
// Relative error is |a - n| / max(|a|, |n|, 1e-8). build must be a pure
// function of the parameter values; two identical evaluations that differ
// raise DeterminismError. order selects the 2-, 4- or 6-point stencil.
GradCheckReport grad_check(const std::function<Tensor()>& build, std::vector<NamedTensor> params, double step,
                           double tol, int order = 2);

// Same comparison, but each element's numeric derivative is taken from a
// ladder of 4-point estimates at steps max_step * 10^(-k/2), k < rungs,
// keeping the neighbouring pair that agrees best once the expected roundoff
// eps*|loss|/step is added. Suited to losses with kinks (ReLU, abs) where no
// single step serves every element.
GradCheckReport grad_check_adaptive(const std::function<Tensor()>& build, std::vector<NamedTensor> params,
                                    double tol, double max_step = 1e-2, std::size_t rungs = 9);

}  // namespace dynasty
