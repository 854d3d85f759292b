#include "dynasty/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dynasty/error.hpp"

namespace dynasty {

bool GradCheckReport::passed() const {
  return std::all_of(params.begin(), params.end(), [](const ParamCheck& p) { return p.passed; });
}

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& p : params) worst = std::max(worst, p.max_rel_error);
  return worst;
}

namespace {

// Central-difference weights for offsets +1..+k steps (antisymmetric).
std::vector<double> stencil_weights(int order) {
  switch (order) {
    case 2: return {1.0 / 2.0};
    case 4: return {8.0 / 12.0, -1.0 / 12.0};
    case 6: return {45.0 / 60.0, -9.0 / 60.0, 1.0 / 60.0};
    default: throw ConfigError("grad_check order must be 2, 4 or 6, got " + std::to_string(order));
  }
}

double central_estimate(const std::function<Tensor()>& build, double& slot, double step,
                        const std::vector<double>& weights) {
  const double original = slot;
  double sum = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    const double offset = static_cast<double>(k + 1) * step;
    slot = original + offset;
    const double plus = build().item();
    slot = original - offset;
    const double minus = build().item();
    sum += weights[k] * (plus - minus);
  }
  slot = original;
  return sum / step;
}

using Estimator = std::function<double(double& slot)>;

GradCheckReport compare(const std::function<Tensor()>& build, std::vector<NamedTensor>& params, double tol,
                        const Estimator& numeric_of) {
  const double first = build().item();
  const double second = build().item();
  if (first != second) {
    throw DeterminismError("grad_check: two evaluations with identical parameters gave " + std::to_string(first) +
                           " and " + std::to_string(second));
  }

  for (auto& p : params) p.tensor.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = build();
    tape.backward(loss);
  }

  GradCheckReport report;
  for (auto& p : params) {
    ParamCheck check;
    check.name = p.name;
    check.elements = p.tensor.numel();
    const std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    auto values = p.tensor.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double numeric = numeric_of(values[i]);
      const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-8});
      const double rel = std::fabs(analytic[i] - numeric) / denom;
      if (i == 0 || rel > check.max_rel_error) {
        check.max_rel_error = rel;
        check.worst_index = i;
        check.worst_analytic = analytic[i];
        check.worst_numeric = numeric;
      }
    }
    check.passed = check.max_rel_error <= tol;
    report.params.push_back(std::move(check));
  }
  return report;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& build, std::vector<NamedTensor> params, double step,
                           double tol, int order) {
  if (!(step > 0.0)) throw ConfigError("grad_check step must be positive");
  const std::vector<double> weights = stencil_weights(order);
  return compare(build, params, tol, [&](double& slot) { return central_estimate(build, slot, step, weights); });
}

GradCheckReport grad_check_adaptive(const std::function<Tensor()>& build, std::vector<NamedTensor> params,
                                    double tol, double max_step, std::size_t rungs) {
  if (!(max_step > 0.0)) throw ConfigError("grad_check max_step must be positive");
  if (rungs < 2) throw ConfigError("grad_check needs at least two steps on the ladder");
  const std::vector<double> weights = stencil_weights(4);
  std::vector<double> steps(rungs);
  for (std::size_t k = 0; k < rungs; ++k) steps[k] = max_step * std::pow(10.0, -0.5 * static_cast<double>(k));
  const double scale = std::fabs(build().item()) * std::numeric_limits<double>::epsilon();

  return compare(build, params, tol, [&](double& slot) {
    std::vector<double> est(rungs);
    for (std::size_t k = 0; k < rungs; ++k) est[k] = central_estimate(build, slot, steps[k], weights);
    // Neighbouring estimates that agree, penalised by the roundoff expected
    // at the smaller step, mark a step that neither crosses a kink nor drowns
    // in cancellation.
    std::size_t best = 0;
    double best_score = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k + 1 < rungs; ++k) {
      const double score = std::fabs(est[k] - est[k + 1]) + scale / steps[k + 1];
      if (score < best_score) {
        best_score = score;
        best = k;
      }
    }
    return est[best];
  });
}

}  // namespace dynasty
