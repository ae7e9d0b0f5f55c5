#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "flexidepth/tensor.hpp"

namespace flexidepth {

struct GradCheckOptions {
  double step = 1e-3;
  // Denominator floor so that near-zero gradients are compared absolutely.
  double floor = 1e-6;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t n_checked = 0;
};

// Compares reverse-mode gradients of the scalar `loss_fn` against central
// differences for every element of `params`. `loss_fn` must be deterministic.
// Throws NumericError when the loss is not finite at any probe point.
GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                           const GradCheckOptions& options = {});

}  // namespace flexidepth
