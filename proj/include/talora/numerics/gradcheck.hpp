// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <vector>

#include "talora/numerics/tensor.hpp"

namespace talora::num {

struct GradCheckReport {
    /// Max over all coordinates of |analytic - central| / max(|analytic|, |central|, 1e-8).
    double max_relative_error = 0.0;
    /// Same statistic restricted to each parameter tensor, in input order.
    std::vector<double> per_param;
};

/// Compares tape gradients of `loss_fn` against central differences.
///
/// `loss_fn` is called once under a fresh tape to collect analytic gradients,
/// then twice per coordinate with no tape active. Every tensor in `params`
/// must be a leaf that requires grad.
GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn, std::span<Tensor> params,
                                  double step = 1e-5);

/// Same check against caller-supplied analytic gradients (one buffer per param).
GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn, std::span<Tensor> params,
                                  std::span<const std::vector<double>> analytic, double step = 1e-5);

}  // namespace talora::num
