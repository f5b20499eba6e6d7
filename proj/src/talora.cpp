// SPDX-License-Identifier: Apache-2.0
#include "talora/talora.hpp"

#include <random>

#include "talora/errors.hpp"
#include "talora/numerics/ops.hpp"

namespace talora {

using num::Tensor;

namespace {

std::size_t to_size(int v) { return static_cast<std::size_t>(v); }

Tensor gaussian(std::mt19937_64& rng, num::Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> values(num::shape_numel(shape));
    for (double& x : values) x = dist(rng);
    return Tensor(std::move(shape), std::move(values));
}

Tensor zero_gate(const BackboneConfig& config, bool per_head) {
    return Tensor::zeros({per_head ? to_size(config.n_heads) : std::size_t{1}});
}

std::size_t find_task(const std::vector<std::string>& tasks, const std::string& name) {
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        if (tasks[i] == name) return i;
    }
    throw ArgumentError("unknown task '" + name + "'");
}

std::vector<Tensor> clone_all(const std::vector<Tensor>& ts) {
    std::vector<Tensor> out;
    out.reserve(ts.size());
    for (const Tensor& t : ts) out.push_back(t.clone());
    return out;
}

}  // namespace

MeanDecomposition mean_decompose(std::span<const Tensor> thetas) {
    if (thetas.size() < 2) throw ArgumentError("mean_decompose: needs at least two tasks");
    const num::Shape& shape = thetas.front().shape();
    for (const Tensor& t : thetas) {
        if (t.shape() != shape) {
            throw DimensionError("mean_decompose: shape " + num::shape_to_string(t.shape()) + " differs from " +
                                 num::shape_to_string(shape));
        }
    }
    const std::size_t n = thetas.front().numel();
    const double inv_t = 1.0 / static_cast<double>(thetas.size());
    std::vector<double> mean(n, 0.0);
    for (const Tensor& t : thetas) {
        const auto x = t.data();
        for (std::size_t k = 0; k < n; ++k) mean[k] += x[k];
    }
    for (double& m : mean) m *= inv_t;
    MeanDecomposition out;
    out.mean = Tensor(shape, mean);
    for (const Tensor& t : thetas) {
        const auto x = t.data();
        std::vector<double> r(n, 0.0);
        for (const Tensor& other : thetas) {
            const auto y = other.data();
            for (std::size_t k = 0; k < n; ++k) r[k] += x[k] - y[k];
        }
        for (double& v : r) v *= inv_t;
        out.residuals.emplace_back(shape, std::move(r));
    }
    return out;
}

std::size_t PromptBank::task_index(const std::string& name) const { return find_task(tasks, name); }

void PromptBank::recompute_mean() {
    const std::size_t layers = theta.empty() ? 0 : theta.front().size();
    theta0.clear();
    for (std::size_t l = 0; l < layers; ++l) {
        std::vector<Tensor> per_task;
        for (const auto& task : theta) per_task.push_back(task[l]);
        theta0.push_back(mean_decompose(per_task).mean);
    }
}

PromptBank PromptBank::clone() const {
    PromptBank b;
    b.tasks = tasks;
    b.first_layer = first_layer;
    for (const auto& t : theta) b.theta.push_back(clone_all(t));
    b.theta0 = clone_all(theta0);
    return b;
}

PromptBank PromptBank::random(const BackboneConfig& config, std::vector<std::string> tasks, std::uint64_t seed,
                              double stddev) {
    config.validate();
    if (tasks.size() < 2) throw ArgumentError("prompt bank: needs at least two tasks");
    PromptBank b;
    b.tasks = std::move(tasks);
    b.first_layer = config.first_lora_layer();
    for (std::size_t i = 0; i < b.tasks.size(); ++i) {
        std::mt19937_64 rng(seed * 1000003ULL + i);
        std::vector<Tensor> layers;
        for (int l = 0; l < config.lora_layers; ++l) {
            layers.push_back(gaussian(rng, {to_size(config.prompt_len), to_size(config.model_dim)}, stddev));
        }
        b.theta.push_back(std::move(layers));
    }
    b.recompute_mean();
    return b;
}

std::size_t LoraFactors::task_index(const std::string& name) const { return find_task(tasks, name); }

LoraFactors LoraFactors::clone() const {
    LoraFactors f;
    f.rank = rank;
    f.scale = scale;
    f.first_layer = first_layer;
    f.tasks = tasks;
    f.slow = clone_all(slow);
    for (const auto& x : u) f.u.push_back(clone_all(x));
    for (const auto& x : v) f.v.push_back(clone_all(x));
    f.gates = clone_all(gates);
    return f;
}

LoraFactors LoraFactors::init(const BackboneConfig& config, std::vector<std::string> tasks, const LoraOptions& options,
                              std::uint64_t seed) {
    config.validate();
    if (options.rank < 1) throw ArgumentError("lora factors: rank must be positive");
    if (tasks.empty()) throw ArgumentError("lora factors: no tasks");
    std::mt19937_64 rng(seed);
    LoraFactors f;
    f.rank = options.rank;
    f.scale = options.scale;
    f.first_layer = config.first_lora_layer();
    f.tasks = std::move(tasks);
    const std::size_t n = to_size(config.prompt_len), r = to_size(options.rank), H = to_size(config.model_dim);
    for (int l = 0; l < config.lora_layers; ++l) {
        f.slow.push_back(gaussian(rng, {n, r}, options.init_std));
        f.gates.push_back(zero_gate(config, options.per_head_gates));
    }
    for (std::size_t i = 0; i < f.tasks.size(); ++i) {
        std::vector<Tensor> us, vs;
        for (int l = 0; l < config.lora_layers; ++l) {
            us.push_back(gaussian(rng, {r}, options.init_std));
            vs.push_back(gaussian(rng, {H}, options.init_std));
        }
        f.u.push_back(std::move(us));
        f.v.push_back(std::move(vs));
    }
    return f;
}

TaskFactors TaskFactors::init(const BackboneConfig& config, const LoraOptions& options, std::uint64_t seed) {
    config.validate();
    if (options.rank < 1) throw ArgumentError("task factors: rank must be positive");
    std::mt19937_64 rng(seed);
    TaskFactors f;
    for (int l = 0; l < config.lora_layers; ++l) {
        f.u.push_back(gaussian(rng, {to_size(options.rank)}, options.init_std));
        f.v.push_back(gaussian(rng, {to_size(config.model_dim)}, options.init_std));
        f.gates.push_back(zero_gate(config, options.per_head_gates));
    }
    return f;
}

Tensor assemble_prompt(const Tensor& theta0, const Tensor& slow, const Tensor& u, const Tensor& v, double scale) {
    if (slow.rank() != 2 || slow.cols() != u.numel() || theta0.rows() != slow.rows() || theta0.cols() != v.numel()) {
        throw DimensionError("assemble_prompt: theta0 " + num::shape_to_string(theta0.shape()) + ", B " +
                             num::shape_to_string(slow.shape()) + ", u " + num::shape_to_string(u.shape()) + ", v " +
                             num::shape_to_string(v.shape()) + " are inconsistent");
    }
    return num::add(theta0, num::scale(num::matmul(slow, num::outer(u, v)), scale));
}

PromptSet assemble_prompts(std::span<const Tensor> theta0, const LoraFactors& factors, std::size_t task) {
    if (theta0.size() != factors.layer_count()) {
        throw DimensionError("assemble_prompts: " + std::to_string(theta0.size()) + " mean prompts for " +
                             std::to_string(factors.layer_count()) + " lora layers");
    }
    if (task >= factors.task_count()) throw ArgumentError("assemble_prompts: task index out of range");
    PromptSet set;
    for (std::size_t l = 0; l < theta0.size(); ++l) {
        set.push_back({factors.first_layer + static_cast<int>(l),
                       assemble_prompt(theta0[l], factors.slow[l], factors.u[task][l], factors.v[task][l],
                                       factors.scale),
                       factors.gates[l]});
    }
    return set;
}

PromptSet assemble_prompts(std::span<const Tensor> theta0, std::span<const Tensor> slow, int first_layer,
                           const TaskFactors& task, double scale) {
    if (theta0.size() != slow.size() || task.u.size() != slow.size() || task.v.size() != slow.size() ||
        task.gates.size() != slow.size()) {
        throw DimensionError("assemble_prompts: layer counts of theta0, B and task factors disagree");
    }
    PromptSet set;
    for (std::size_t l = 0; l < theta0.size(); ++l) {
        set.push_back({first_layer + static_cast<int>(l), assemble_prompt(theta0[l], slow[l], task.u[l], task.v[l], scale),
                       task.gates[l]});
    }
    return set;
}

Tensor orthogonality_penalty(const LoraFactors& factors) {
    const std::size_t t = factors.task_count();
    if (t < 2) throw ArgumentError("orthogonality_penalty: needs at least two tasks");
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t l = 0; l < factors.layer_count(); ++l) {
        const double H = static_cast<double>(factors.v[0][l].numel());
        std::vector<Tensor> norms;
        for (std::size_t i = 0; i < t; ++i) norms.push_back(num::sum_squares(factors.v[i][l]));
        for (std::size_t i = 0; i < t; ++i) {
            for (std::size_t j = i + 1; j < t; ++j) {
                const Tensor uu = num::dot(factors.u[i][l], factors.u[j][l]);
                const Tensor vv = num::dot(factors.v[i][l], factors.v[j][l]);
                const Tensor quad = num::mul(num::mul(uu, uu), num::mul(norms[i], norms[j]));
                const Tensor cross = num::scale(num::mul(uu, vv), -2.0);
                // The (i,j) and (j,i) terms are equal.
                const Tensor pair = num::scale(num::add(num::add(quad, cross), Tensor::scalar(H)), 2.0);
                total = num::add(total, pair);
            }
        }
    }
    return total;
}

ParamAccounting count_params(const BackboneConfig& config, int tasks, int rank, bool per_head_gates) {
    config.validate();
    if (rank < 1) throw ArgumentError("count_params: rank must be positive");
    if (tasks < 1) throw ArgumentError("count_params: tasks must be positive");
    const std::size_t L = to_size(config.lora_layers), n = to_size(config.prompt_len);
    const std::size_t H = to_size(config.model_dim), r = to_size(rank);
    ParamAccounting a;
    a.tasks = to_size(tasks);
    a.per_task_fast = L * (r + H);
    a.shared_slow = L * n * r;
    a.prompt_mean = L * n * H;
    a.gates = L * (per_head_gates ? to_size(config.n_heads) : 1);
    a.backbone_frozen = backbone_parameter_count(config);
    a.pt_per_task = L * n * H;
    a.ratio = static_cast<double>(a.per_task_fast) / static_cast<double>(a.backbone_frozen);
    return a;
}

}  // namespace talora
