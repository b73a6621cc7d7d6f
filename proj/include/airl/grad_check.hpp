#pragma once

#include "airl/tensor.hpp"

#include <functional>
#include <vector>

namespace airl {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  // coordinates whose central difference straddled a relu/leaky-relu kink
  std::size_t skipped = 0;
  // parameter index and flat coordinate of the worst mismatch
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  // coordinates above the tolerance
  std::size_t failed = 0;
  // f at the unperturbed point
  double value = 0.0;
  bool pass = false;
};

// Compares analytic gradients of a scalar function of `params` against central
// differences, coordinate by coordinate. Relative error uses
// max(|analytic|, |numeric|, 1e-8) as the denominator.
GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double step,
                           double tol);

// Single-input form: f is evaluated at a copy of `point`.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double step,
                           double tol);

}  // namespace airl
