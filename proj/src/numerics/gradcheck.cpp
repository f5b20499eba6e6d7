// SPDX-License-Identifier: Apache-2.0
#include "talora/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "talora/errors.hpp"
#include "talora/numerics/tape.hpp"

namespace talora::num {

namespace {

double evaluate(const std::function<Tensor()>& loss_fn) {
    NoGradGuard no_grad;
    const double v = loss_fn().item();
    if (!std::isfinite(v)) throw EvaluationError("finite_diff_check: loss evaluated to a non-finite value");
    return v;
}

}  // namespace

GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn, std::span<Tensor> params, double step) {
    for (Tensor& p : params) {
        if (!p.requires_grad()) throw ArgumentError("finite_diff_check: parameter does not require grad");
        p.zero_grad();
    }
    {
        GradientTape tape;
        Tensor loss = loss_fn();
        if (!std::isfinite(loss.item())) throw EvaluationError("finite_diff_check: loss evaluated to a non-finite value");
        tape.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (Tensor& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());
    return finite_diff_check(loss_fn, params, analytic, step);
}

GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn, std::span<Tensor> params,
                                  std::span<const std::vector<double>> analytic, double step) {
    if (!(step > 0.0)) throw ArgumentError("finite_diff_check: step must be positive");
    if (analytic.size() != params.size()) {
        throw ArgumentError("finite_diff_check: analytic gradient count does not match parameter count");
    }
    GradCheckReport report;
    report.per_param.assign(params.size(), 0.0);
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& param = params[p];
        if (analytic[p].size() != param.numel()) {
            throw DimensionError("finite_diff_check: analytic gradient size mismatch for parameter " +
                                 std::to_string(p));
        }
        auto values = param.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + step;
            const double up = evaluate(loss_fn);
            values[i] = saved - step;
            const double down = evaluate(loss_fn);
            values[i] = saved;
            const double central = (up - down) / (2.0 * step);
            const double a = analytic[p][i];
            const double denom = std::max({std::abs(a), std::abs(central), 1e-8});
            const double rel = std::abs(a - central) / denom;
            report.per_param[p] = std::max(report.per_param[p], rel);
        }
        report.max_relative_error = std::max(report.max_relative_error, report.per_param[p]);
    }
    return report;
}

}  // namespace talora::num
