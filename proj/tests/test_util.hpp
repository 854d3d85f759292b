#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dynasty/random.hpp"
#include "dynasty/tensor.hpp"

namespace testutil {

using dynasty::Rng;
using dynasty::Shape;
using dynasty::Tensor;

inline Tensor random_tensor(Rng& rng, Shape shape, bool requires_grad = true, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(dynasty::shape_numel(shape));
  for (double& x : v) x = dynasty::uniform(rng, lo, hi);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from zero, for ops with a kink there.
inline Tensor away_from_zero(Rng& rng, Shape shape, bool requires_grad = true) {
  Tensor t = random_tensor(rng, std::move(shape), requires_grad, 0.2, 1.0);
  for (double& x : t.mutable_values()) {
    if (dynasty::bernoulli(rng, 0.5)) x = -x;
  }
  return t;
}

// Central differences of f with respect to every element of x.
inline std::vector<double> central_difference(const std::function<double()>& f, Tensor x, double step) {
  std::vector<double> out(x.numel());
  auto v = x.mutable_values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double orig = v[i];
    v[i] = orig + step;
    const double plus = f();
    v[i] = orig - step;
    const double minus = f();
    v[i] = orig;
    out[i] = (plus - minus) / (2.0 * step);
  }
  return out;
}

inline double max_rel_error(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::fabs(a[i]), std::fabs(b[i]), 1e-8});
    worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
  }
  return worst;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
  return worst;
}

}  // namespace testutil
