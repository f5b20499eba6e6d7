// SPDX-License-Identifier: Apache-2.0
#include "talora/numerics/tape.hpp"

#include "talora/errors.hpp"

namespace talora::num {

namespace {
thread_local GradientTape* g_active = nullptr;
}

GradientTape::GradientTape() : previous_(g_active) { g_active = this; }

GradientTape::~GradientTape() {
    if (g_active == this) g_active = previous_;
}

GradientTape* GradientTape::active() noexcept { return g_active; }

void GradientTape::record(std::function<void()> reverse_rule) {
    if (consumed_) throw StateError("gradient tape already consumed by a backward pass");
    rules_.push_back(std::move(reverse_rule));
}

void GradientTape::backward(const Tensor& loss) {
    if (consumed_) throw StateError("gradient tape already consumed by a backward pass");
    if (!loss.defined() || loss.numel() != 1) {
        throw ArgumentError("backward needs a scalar loss, got shape " +
                            (loss.defined() ? shape_to_string(loss.shape()) : std::string("<undefined>")));
    }
    consumed_ = true;
    if (g_active == this) g_active = previous_;
    if (loss.requires_grad()) {
        Tensor seed = loss;
        seed.raw_grad()[0] += 1.0;
        for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
    }
    rules_.clear();
}

void backward(const Tensor& loss, GradientTape& tape) { tape.backward(loss); }

NoGradGuard::NoGradGuard() : saved_(g_active) { g_active = nullptr; }
NoGradGuard::~NoGradGuard() { g_active = saved_; }

}  // namespace talora::num
