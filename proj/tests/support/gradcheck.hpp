#pragma once

// Central finite-difference oracle for gradient checks. Lives in test code
// only; deliberately independent of the backward rules it verifies.

#include <pit/tensor.hpp>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace pit::testing {

struct GradCheckResult {
  bool ok = true;
  double worst_rel = 0.0;
  std::string worst_where;
};

// Relative error with an absolute floor so near-zero gradients do not
// amplify finite-difference cancellation noise (~|loss|*eps/step, which can
// reach 1e-10 for O(1) losses at step 1e-5).
inline double rel_error(double analytic, double numeric, double floor = 1e-5) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor});
  return std::fabs(analytic - numeric) / denom;
}

// Central differences of `loss_fn` w.r.t. every element of `param`.
// `loss_fn` must re-run the forward pass from current parameter values.
inline std::vector<double> finite_diff(Tensor& param, const std::function<double()>& loss_fn,
                                       double step = 1e-5) {
  std::vector<double> out(param.values().size());
  NoGradGuard ng;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double saved = param.data()[i];
    param.data()[i] = saved + step;
    const double plus = loss_fn();
    param.data()[i] = saved - step;
    const double minus = loss_fn();
    param.data()[i] = saved;
    out[i] = (plus - minus) / (2.0 * step);
  }
  return out;
}

inline GradCheckResult compare_grads(const std::string& name, const std::vector<double>& analytic,
                                     const std::vector<double>& numeric, double tol = 1e-4,
                                     double floor = 1e-5) {
  GradCheckResult r;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double e = rel_error(analytic[i], numeric[i], floor);
    if (e > r.worst_rel) {
      r.worst_rel = e;
      r.worst_where = name + "[" + std::to_string(i) + "] analytic=" +
                      std::to_string(analytic[i]) + " numeric=" + std::to_string(numeric[i]);
    }
  }
  r.ok = r.worst_rel < tol;
  return r;
}

// One-call check: build loss from scratch via `make_loss`, backprop, compare
// the gradient of `param` against central differences.
inline GradCheckResult check_gradient(const std::string& name, Tensor& param,
                                      const std::function<Tensor()>& make_loss, double tol = 1e-4,
                                      double step = 1e-5, double floor = 1e-5) {
  param.zero_grad();
  Tensor loss = make_loss();
  backward(loss);
  const std::vector<double> analytic = param.grad();
  const auto numeric = finite_diff(
      param, [&] { return make_loss().item(); }, step);
  return compare_grads(name, analytic, numeric, tol, floor);
}

}  // namespace pit::testing
