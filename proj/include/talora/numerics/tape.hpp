// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "talora/numerics/tensor.hpp"

namespace talora::num {

/// Ordered record of differentiable operations.
///
/// Constructing a tape makes it the active tape of the calling thread until
/// it is destroyed; operations executed meanwhile whose inputs require grad
/// append their reverse rule. A tape supports exactly one backward pass.
class GradientTape {
public:
    GradientTape();
    ~GradientTape();
    GradientTape(const GradientTape&) = delete;
    GradientTape& operator=(const GradientTape&) = delete;

    /// Active tape of this thread, or nullptr.
    static GradientTape* active() noexcept;

    void record(std::function<void()> reverse_rule);
    /// Seeds d(loss)/d(loss) = 1 and replays the recorded rules in reverse.
    void backward(const Tensor& loss);

    bool consumed() const noexcept { return consumed_; }
    std::size_t size() const noexcept { return rules_.size(); }

private:
    std::vector<std::function<void()>> rules_;
    GradientTape* previous_ = nullptr;
    bool consumed_ = false;
};

void backward(const Tensor& loss, GradientTape& tape);

/// Suspends recording on this thread for the lifetime of the guard.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    GradientTape* saved_;
};

}  // namespace talora::num
