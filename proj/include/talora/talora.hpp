// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "talora/backbone.hpp"
#include "talora/numerics/tensor.hpp"

namespace talora {

struct MeanDecomposition {
    num::Tensor mean;
    std::vector<num::Tensor> residuals;
};

/// Splits per-task tensors into their arithmetic mean and per-task residuals,
/// residual_i = (1/t) * sum_j (theta_i - theta_j).
MeanDecomposition mean_decompose(std::span<const num::Tensor> thetas);

/// Per-task adaptable prompts of the lora layers and their shared mean.
struct PromptBank {
    std::vector<std::string> tasks;
    /// Absolute index of the first lora layer.
    int first_layer = 0;
    /// theta[task][k] is the n×H prompt of layer first_layer + k.
    std::vector<std::vector<num::Tensor>> theta;
    /// Mean over tasks, per lora layer.
    std::vector<num::Tensor> theta0;

    std::size_t task_count() const { return theta.size(); }
    std::size_t layer_count() const { return theta0.size(); }
    std::size_t task_index(const std::string& name) const;
    void recompute_mean();
    PromptBank clone() const;

    /// Gaussian-initialized prompts, a different draw per task.
    static PromptBank random(const BackboneConfig& config, std::vector<std::string> tasks, std::uint64_t seed,
                             double stddev);
};

struct LoraOptions {
    int rank = 4;
    /// Fixed magnitude of the task-specific term.
    double scale = 1.0;
    /// One gate per head instead of one per layer.
    bool per_head_gates = false;
    double init_std = 0.02;
};

/// Fast-slow factors: the slow B is shared by all tasks, each task owns the
/// rank-1 fast weight u ⊗ v. Indices are [task][lora layer].
struct LoraFactors {
    int rank = 0;
    double scale = 1.0;
    int first_layer = 0;
    std::vector<std::string> tasks;
    std::vector<num::Tensor> slow;
    std::vector<std::vector<num::Tensor>> u;
    std::vector<std::vector<num::Tensor>> v;
    /// Shared per-layer gates, initialized to exactly zero.
    std::vector<num::Tensor> gates;

    std::size_t task_count() const { return u.size(); }
    std::size_t layer_count() const { return slow.size(); }
    std::size_t task_index(const std::string& name) const;
    LoraFactors clone() const;

    static LoraFactors init(const BackboneConfig& config, std::vector<std::string> tasks, const LoraOptions& options,
                            std::uint64_t seed);
};

/// Fresh per-task fast vectors and gates for one (target) task.
struct TaskFactors {
    std::vector<num::Tensor> u;
    std::vector<num::Tensor> v;
    std::vector<num::Tensor> gates;

    static TaskFactors init(const BackboneConfig& config, const LoraOptions& options, std::uint64_t seed);
};

/// P_a = theta0 + s * B (u ⊗ v), differentiable in B, u and v.
num::Tensor assemble_prompt(const num::Tensor& theta0, const num::Tensor& slow, const num::Tensor& u,
                            const num::Tensor& v, double scale);

/// Prompts of every lora layer for one source task.
PromptSet assemble_prompts(std::span<const num::Tensor> theta0, const LoraFactors& factors, std::size_t task);
/// Prompts of every lora layer for separately held task factors.
PromptSet assemble_prompts(std::span<const num::Tensor> theta0, std::span<const num::Tensor> slow, int first_layer,
                           const TaskFactors& task, double scale);

/// sum over layers, sum over ordered task pairs i != j of ||A_i^T A_j - I||_F^2
/// with A = u ⊗ v, evaluated through the closed form
/// (u_i.u_j)^2 |v_i|^2 |v_j|^2 - 2 (u_i.u_j)(v_i.v_j) + H.
num::Tensor orthogonality_penalty(const LoraFactors& factors);

struct ParamAccounting {
    std::size_t per_task_fast = 0;
    std::size_t shared_slow = 0;
    std::size_t prompt_mean = 0;
    std::size_t gates = 0;
    std::size_t backbone_frozen = 0;
    /// Per-task prompt size of vanilla prompt tuning, L·n·H.
    std::size_t pt_per_task = 0;
    std::size_t tasks = 0;
    /// per_task_fast / backbone_frozen.
    double ratio = 0.0;
    /// Everything trained in the joint phase: t·per_task_fast + shared_slow + gates.
    std::size_t total_trainable() const { return tasks * per_task_fast + shared_slow + gates; }
};

ParamAccounting count_params(const BackboneConfig& config, int tasks, int rank = 4, bool per_head_gates = false);

}  // namespace talora
