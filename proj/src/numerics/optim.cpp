// SPDX-License-Identifier: Apache-2.0
#include "talora/numerics/optim.hpp"

#include <cmath>

#include "talora/errors.hpp"

namespace talora::num {

void Adam::add_group(std::string name, std::vector<Tensor> params, double lr) {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ArgumentError("Adam: invalid learning rate for group " + name);
    Group g{std::move(name), lr, {}};
    for (Tensor& p : params) {
        p.set_requires_grad(true);
        g.slots.push_back({p, std::vector<double>(p.numel(), 0.0), std::vector<double>(p.numel(), 0.0)});
    }
    groups_.push_back(std::move(g));
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
    for (Group& g : groups_) {
        for (Slot& s : g.slots) {
            auto x = s.param.mutable_data();
            auto grad = s.param.mutable_grad();
            for (std::size_t i = 0; i < x.size(); ++i) {
                s.m[i] = hyper_.beta1 * s.m[i] + (1.0 - hyper_.beta1) * grad[i];
                s.v[i] = hyper_.beta2 * s.v[i] + (1.0 - hyper_.beta2) * grad[i] * grad[i];
                if (g.lr == 0.0) continue;
                const double mhat = s.m[i] / bc1;
                const double vhat = s.v[i] / bc2;
                x[i] -= g.lr * mhat / (std::sqrt(vhat) + hyper_.eps);
            }
        }
    }
    zero_grad();
}

void Adam::zero_grad() {
    for (Group& g : groups_) {
        for (Slot& s : g.slots) s.param.zero_grad();
    }
}

}  // namespace talora::num
