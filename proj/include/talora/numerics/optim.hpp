// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "talora/numerics/tensor.hpp"

namespace talora::num {

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam over named parameter groups, each with its own learning rate.
class Adam {
public:
    explicit Adam(AdamHyper hyper = {}) : hyper_(hyper) {}

    /// Registers leaves under one learning rate; marks them as requiring grad.
    void add_group(std::string name, std::vector<Tensor> params, double lr);

    /// Applies one update from the current gradients, then zeroes them.
    void step();
    void zero_grad();

    std::size_t steps_taken() const noexcept { return t_; }

private:
    struct Slot {
        Tensor param;
        std::vector<double> m, v;
    };
    struct Group {
        std::string name;
        double lr;
        std::vector<Slot> slots;
    };
    AdamHyper hyper_;
    std::vector<Group> groups_;
    std::size_t t_ = 0;
};

}  // namespace talora::num
