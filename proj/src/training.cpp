// SPDX-License-Identifier: Apache-2.0
#include "talora/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "talora/errors.hpp"
#include "talora/numerics/ops.hpp"
#include "talora/numerics/tape.hpp"

namespace talora {

using num::Tensor;

namespace {

constexpr std::size_t kEvalChunk = 64;

std::size_t to_size(int v) { return static_cast<std::size_t>(v); }

void check_rate(double lr, const char* name) {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ArgumentError(std::string("train config: ") + name + " must be >= 0");
}

std::vector<Tensor> clone_all(std::span<const Tensor> ts) {
    std::vector<Tensor> out;
    out.reserve(ts.size());
    for (const Tensor& t : ts) out.push_back(t.clone());
    return out;
}

void release(std::span<Tensor> ts) {
    for (Tensor& t : ts) t.set_requires_grad(false);
}

std::vector<std::size_t> draw_batch(std::mt19937_64& rng, std::size_t pool, int batch_size) {
    std::uniform_int_distribution<std::size_t> pick(0, pool - 1);
    std::vector<std::size_t> idx(to_size(batch_size));
    for (std::size_t& i : idx) i = pick(rng);
    return idx;
}

void require_frozen(const BackboneWeights& backbone, const char* who) {
    if (!backbone.frozen()) throw StateError(std::string(who) + ": backbone must be frozen");
}

double finite_or_throw(const Tensor& loss, const std::string& task, int step) {
    const double value = loss.item();
    if (!std::isfinite(value)) {
        throw TrainingError("loss diverged on task " + task + " at step " + std::to_string(step));
    }
    return value;
}

/// Running sums behind Metrics.
struct MetricSums {
    std::size_t samples = 0, exact = 0, tokens = 0, correct = 0;
    double nll = 0.0;

    void add(const Tensor& logits, std::span<const int> labels, std::span<const std::size_t> offsets) {
        const std::size_t V = logits.cols();
        if (logits.rows() != labels.size()) {
            throw DimensionError("metrics: " + std::to_string(logits.rows()) + " logit rows for " +
                                 std::to_string(labels.size()) + " labels");
        }
        const auto x = logits.data();
        for (std::size_t b = 0; b + 1 < offsets.size(); ++b) {
            bool all = true, any = false;
            for (std::size_t r = offsets[b]; r < offsets[b + 1]; ++r) {
                const int y = labels[r];
                if (y < 0) continue;
                if (static_cast<std::size_t>(y) >= V) throw ArgumentError("metrics: label outside vocabulary");
                any = true;
                const double* row = x.data() + r * V;
                const std::size_t best = static_cast<std::size_t>(std::max_element(row, row + V) - row);
                const double m = row[best];
                double z = 0.0;
                for (std::size_t c = 0; c < V; ++c) z += std::exp(row[c] - m);
                nll += std::log(z) + m - row[y];
                ++tokens;
                if (best == static_cast<std::size_t>(y)) {
                    ++correct;
                } else {
                    all = false;
                }
            }
            if (!any) continue;
            ++samples;
            if (all) ++exact;
        }
    }

    Metrics result() const {
        Metrics m;
        m.samples = samples;
        if (samples) m.exact_match = static_cast<double>(exact) / static_cast<double>(samples);
        if (tokens) {
            m.token_accuracy = static_cast<double>(correct) / static_cast<double>(tokens);
            m.loss = nll / static_cast<double>(tokens);
        }
        return m;
    }
};

}  // namespace

void TrainConfig::validate() const {
    check_rate(lr_prompt, "lr_prompt");
    check_rate(lr_slow, "lr_slow");
    check_rate(lr_fast, "lr_fast");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ArgumentError("train config: lambda must be >= 0");
    if (phase1_steps < 0 || phase2_steps < 0 || phase3_steps < 0) {
        throw ArgumentError("train config: step counts must be >= 0");
    }
    if (batch_size < 1) throw ArgumentError("train config: batch_size must be positive");
    if (shots < 1) throw ArgumentError("train config: shots must be positive");
    if (snapshot_every < 1) throw ArgumentError("train config: snapshot_every must be positive");
    if (lora.rank < 1) throw ArgumentError("train config: rank must be positive");
    if (!(lora.scale > 0.0)) throw ArgumentError("train config: scale must be positive");
}

nlohmann::json to_json(const TrainConfig& c) {
    return {{"lr_prompt", c.lr_prompt},
            {"lr_slow", c.lr_slow},
            {"lr_fast", c.lr_fast},
            {"lambda", c.lambda},
            {"phase1_steps", c.phase1_steps},
            {"phase2_steps", c.phase2_steps},
            {"phase3_steps", c.phase3_steps},
            {"batch_size", c.batch_size},
            {"seed", c.seed},
            {"adam_beta1", c.adam.beta1},
            {"adam_beta2", c.adam.beta2},
            {"adam_eps", c.adam.eps},
            {"shots", c.shots},
            {"prompt_init_std", c.prompt_init_std},
            {"rank", c.lora.rank},
            {"scale", c.lora.scale},
            {"per_head_gates", c.lora.per_head_gates},
            {"factor_init_std", c.lora.init_std},
            {"snapshot_every", c.snapshot_every}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lr_prompt = j.value("lr_prompt", c.lr_prompt);
    c.lr_slow = j.value("lr_slow", c.lr_slow);
    c.lr_fast = j.value("lr_fast", c.lr_fast);
    c.lambda = j.value("lambda", c.lambda);
    c.phase1_steps = j.value("phase1_steps", c.phase1_steps);
    c.phase2_steps = j.value("phase2_steps", c.phase2_steps);
    c.phase3_steps = j.value("phase3_steps", c.phase3_steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.adam.beta1 = j.value("adam_beta1", c.adam.beta1);
    c.adam.beta2 = j.value("adam_beta2", c.adam.beta2);
    c.adam.eps = j.value("adam_eps", c.adam.eps);
    c.shots = j.value("shots", c.shots);
    c.prompt_init_std = j.value("prompt_init_std", c.prompt_init_std);
    c.lora.rank = j.value("rank", c.lora.rank);
    c.lora.scale = j.value("scale", c.lora.scale);
    c.lora.per_head_gates = j.value("per_head_gates", c.lora.per_head_gates);
    c.lora.init_std = j.value("factor_init_std", c.lora.init_std);
    c.snapshot_every = j.value("snapshot_every", c.snapshot_every);
    c.validate();
    return c;
}

nlohmann::json to_json(const BackboneConfig& c) {
    return {{"vocab_size", c.vocab_size}, {"model_dim", c.model_dim},     {"n_heads", c.n_heads},
            {"n_layers", c.n_layers},     {"max_seq_len", c.max_seq_len}, {"prompt_len", c.prompt_len},
            {"lora_layers", c.lora_layers}, {"ffn_mult", c.ffn_mult},     {"task_markers", c.task_markers}};
}

BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
    BackboneConfig c;
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.model_dim = j.value("model_dim", c.model_dim);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.prompt_len = j.value("prompt_len", c.prompt_len);
    c.lora_layers = j.value("lora_layers", c.lora_layers);
    c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
    c.task_markers = j.value("task_markers", c.task_markers);
    c.validate();
    return c;
}

TrunkCache::TrunkCache(const BackboneWeights& weights, std::span<const Sample> samples, std::optional<int> lead) {
    num::NoGradGuard no_grad;
    for (std::size_t lo = 0; lo < samples.size(); lo += kEvalChunk) {
        const std::size_t hi = std::min(samples.size(), lo + kEvalChunk);
        std::vector<std::vector<int>> tokens;
        for (std::size_t i = lo; i < hi; ++i) {
            EncodedSample enc = encode_sample(samples[i], lead);
            labels_.push_back(std::move(enc.labels));
            tokens.push_back(std::move(enc.tokens));
        }
        const RaggedRows trunk = forward_trunk(weights, tokens);
        for (std::size_t b = 0; b < trunk.batch(); ++b) {
            rows_.push_back(num::slice_rows(trunk.rows, trunk.offsets[b], trunk.offsets[b + 1]));
        }
    }
}

RaggedRows TrunkCache::batch(std::span<const std::size_t> indices, std::vector<int>& labels) const {
    if (indices.empty()) throw ArgumentError("trunk cache: empty batch");
    RaggedRows out;
    out.offsets.assign(1, 0);
    labels.clear();
    std::vector<Tensor> parts;
    for (std::size_t i : indices) {
        if (i >= rows_.size()) throw ArgumentError("trunk cache: sample index out of range");
        parts.push_back(rows_[i]);
        labels.insert(labels.end(), labels_[i].begin(), labels_[i].end());
        out.offsets.push_back(out.offsets.back() + rows_[i].rows());
    }
    num::NoGradGuard no_grad;
    out.rows = num::concat_rows(parts);
    return out;
}

PromptSet BasePromptResult::prompts(std::size_t task) const {
    if (task >= bank.task_count()) throw ArgumentError("base prompts: task index out of range");
    PromptSet set;
    for (std::size_t l = 0; l < bank.layer_count(); ++l) {
        set.push_back({bank.first_layer + static_cast<int>(l), bank.theta[task][l], gates[task][l]});
    }
    return set;
}

BasePromptResult train_base_prompts(const BackboneWeights& backbone, std::span<const TaskDataset> tasks,
                                    const TrainConfig& config) {
    config.validate();
    require_frozen(backbone, "train_base_prompts");
    if (tasks.size() < 2) throw ArgumentError("train_base_prompts: needs at least two source tasks");
    const BackboneConfig& bc = backbone.config;
    std::vector<std::string> names;
    for (const TaskDataset& ds : tasks) {
        if (ds.train.empty()) throw ArgumentError("train_base_prompts: task " + ds.task + " has no training samples");
        names.push_back(ds.task);
    }

    BasePromptResult out;
    out.bank = PromptBank::random(bc, names, config.seed, config.prompt_init_std);
    const std::size_t t = tasks.size();
    const std::size_t gate_size = config.lora.per_head_gates ? to_size(bc.n_heads) : 1;
    out.gates.assign(t, {});
    out.loss_trace.assign(t, {});

    // snaps[task] holds (step, prompts) pairs in step order.
    std::vector<std::vector<std::vector<Tensor>>> snaps(t);
    std::vector<int> snap_steps;
    for (int s = 0; s < config.phase1_steps; s += config.snapshot_every) snap_steps.push_back(s);
    snap_steps.push_back(config.phase1_steps);

    const std::optional<int> lead = prompted_lead_token(bc);
    for (std::size_t i = 0; i < t; ++i) {
        std::vector<Tensor>& theta = out.bank.theta[i];
        std::vector<Tensor>& gates = out.gates[i];
        for (std::size_t l = 0; l < theta.size(); ++l) gates.push_back(Tensor::zeros({gate_size}));
        const TrunkCache cache(backbone, tasks[i].train, lead);

        num::Adam adam(config.adam);
        std::vector<Tensor> params = theta;
        params.insert(params.end(), gates.begin(), gates.end());
        adam.add_group("prompt", params, config.lr_prompt);

        std::mt19937_64 rng(config.seed * 1000003ULL + 7919ULL * (i + 1));
        std::size_t next_snap = 0;
        std::vector<int> labels;
        for (int step = 0;; ++step) {
            if (next_snap < snap_steps.size() && snap_steps[next_snap] == step) {
                snaps[i].push_back(clone_all(theta));
                ++next_snap;
            }
            if (step == config.phase1_steps) break;
            const auto idx = draw_batch(rng, cache.size(), config.batch_size);
            const RaggedRows trunk = cache.batch(idx, labels);
            num::GradientTape tape;
            const PromptSet prompts = out.prompts(i);
            const Tensor loss = num::cross_entropy_from_logits(forward_from_trunk(backbone, trunk, &prompts), labels);
            out.loss_trace[i].push_back(finite_or_throw(loss, tasks[i].task, step));
            tape.backward(loss);
            adam.step();
        }
        release(params);
    }
    out.bank.recompute_mean();
    for (std::size_t s = 0; s < snap_steps.size(); ++s) {
        BankSnapshot snap;
        snap.step = snap_steps[s];
        for (std::size_t i = 0; i < t; ++i) snap.theta.push_back(snaps[i][s]);
        out.snapshots.push_back(std::move(snap));
    }
    return out;
}

double mean_abs_tanh(std::span<const Tensor> gates) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const Tensor& g : gates) {
        for (double x : g.data()) {
            sum += std::abs(std::tanh(x));
            ++n;
        }
    }
    return n ? sum / static_cast<double>(n) : 0.0;
}

TaloraResult train_talora(const BackboneWeights& backbone, const PromptBank& bank, const LoraFactors& initial,
                          std::span<const TaskDataset> tasks, const TrainConfig& config) {
    config.validate();
    require_frozen(backbone, "train_talora");
    const std::size_t t = tasks.size();
    if (t < 2) throw ArgumentError("train_talora: needs at least two source tasks");
    if (initial.task_count() != t) {
        throw DimensionError("train_talora: factors hold " + std::to_string(initial.task_count()) + " tasks, got " +
                             std::to_string(t) + " datasets");
    }
    if (bank.layer_count() != initial.layer_count() || bank.first_layer != initial.first_layer) {
        throw DimensionError("train_talora: prompt bank and factors cover different layers");
    }
    for (std::size_t l = 0; l < bank.layer_count(); ++l) {
        if (bank.theta0[l].rows() != initial.slow[l].rows()) {
            throw DimensionError("train_talora: theta0 and B disagree on prompt length at layer " + std::to_string(l));
        }
    }
    for (const TaskDataset& ds : tasks) {
        if (ds.train.empty()) throw ArgumentError("train_talora: task " + ds.task + " has no training samples");
    }

    TaloraResult out{initial.clone(), {}};
    LoraFactors& f = out.factors;
    num::Adam adam(config.adam);
    adam.add_group("slow", f.slow, config.lr_slow);
    std::vector<Tensor> fast;
    for (std::size_t i = 0; i < t; ++i) {
        fast.insert(fast.end(), f.u[i].begin(), f.u[i].end());
        fast.insert(fast.end(), f.v[i].begin(), f.v[i].end());
    }
    fast.insert(fast.end(), f.gates.begin(), f.gates.end());
    adam.add_group("fast", fast, config.lr_fast);

    const std::optional<int> lead = prompted_lead_token(backbone.config);
    std::vector<TrunkCache> caches;
    for (const TaskDataset& ds : tasks) caches.emplace_back(backbone, ds.train, lead);

    std::mt19937_64 rng(config.seed * 1000003ULL + 104729ULL);
    std::vector<int> labels;
    for (int step = 0; step < config.phase2_steps; ++step) {
        const std::size_t task = to_size(step) % t;
        const auto idx = draw_batch(rng, caches[task].size(), config.batch_size);
        const RaggedRows trunk = caches[task].batch(idx, labels);
        num::GradientTape tape;
        const PromptSet prompts = assemble_prompts(bank.theta0, f, task);
        const Tensor ce = num::cross_entropy_from_logits(forward_from_trunk(backbone, trunk, &prompts), labels);
        const Tensor penalty = orthogonality_penalty(f);
        const Tensor loss = config.lambda > 0.0 ? num::add(ce, num::scale(penalty, config.lambda)) : ce;
        TraceRow row;
        row.step = step;
        row.task = tasks[task].task;
        row.loss = finite_or_throw(loss, tasks[task].task, step);
        row.penalty = penalty.item();
        row.mean_abs_tanh_gate = mean_abs_tanh(f.gates);
        out.trace.push_back(std::move(row));
        tape.backward(loss);
        adam.step();
    }
    release(f.slow);
    release(fast);
    return out;
}

Metrics metrics_from_logits(const Tensor& logits, std::span<const int> labels, std::span<const std::size_t> offsets) {
    MetricSums sums;
    sums.add(logits, labels, offsets);
    return sums.result();
}

Metrics evaluate(const BackboneWeights& backbone, const PromptSet* prompts, std::span<const Sample> split) {
    if (split.empty()) throw ArgumentError("evaluate: empty split");
    num::NoGradGuard no_grad;
    const std::optional<int> lead = prompted_lead_token(backbone.config);
    MetricSums sums;
    for (std::size_t lo = 0; lo < split.size(); lo += kEvalChunk) {
        const std::size_t hi = std::min(split.size(), lo + kEvalChunk);
        std::vector<std::vector<int>> tokens;
        std::vector<int> labels;
        for (std::size_t i = lo; i < hi; ++i) {
            EncodedSample enc = encode_sample(split[i], lead);
            labels.insert(labels.end(), enc.labels.begin(), enc.labels.end());
            tokens.push_back(std::move(enc.tokens));
        }
        const RaggedRows logits = forward_ragged(backbone, tokens, prompts);
        sums.add(logits.rows, labels, logits.offsets);
    }
    return sums.result();
}

Metrics evaluate(const BackboneWeights& backbone, std::span<const Tensor> theta0, std::span<const Tensor> slow,
                 const TaskFactors& task, double scale, std::span<const Sample> split) {
    num::NoGradGuard no_grad;
    const PromptSet prompts =
        assemble_prompts(theta0, slow, backbone.config.first_lora_layer(), task, scale);
    return evaluate(backbone, &prompts, split);
}

AdaptResult adapt_target(const BackboneWeights& backbone, std::span<const Tensor> theta0, std::span<const Tensor> slow,
                         const TaskDataset& target, int k, const TrainConfig& config) {
    config.validate();
    require_frozen(backbone, "adapt_target");
    if (k < 1) throw ArgumentError("adapt_target: k must be positive, got " + std::to_string(k));
    if (to_size(k) > target.train.size()) {
        throw ArgumentError("adapt_target: k=" + std::to_string(k) + " exceeds the " +
                            std::to_string(target.train.size()) + " available samples of " + target.task);
    }
    if (target.unseen.empty()) throw ArgumentError("adapt_target: task " + target.task + " has no held-out samples");

    std::mt19937_64 rng(config.seed * 1000003ULL + 15485863ULL);
    std::vector<std::size_t> order(target.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Sample> shots;
    for (int j = 0; j < k; ++j) shots.push_back(target.train[order[to_size(j)]]);

    AdaptResult out;
    out.factors = TaskFactors::init(backbone.config, config.lora, config.seed * 1000003ULL + 32452843ULL);
    const double s = config.lora.scale;
    out.baseline = evaluate(backbone, theta0, slow, out.factors, s, target.unseen);

    num::Adam adam(config.adam);
    std::vector<Tensor> params = out.factors.u;
    params.insert(params.end(), out.factors.v.begin(), out.factors.v.end());
    params.insert(params.end(), out.factors.gates.begin(), out.factors.gates.end());
    adam.add_group("fast", params, config.lr_fast);

    const TrunkCache cache(backbone, shots, prompted_lead_token(backbone.config));
    const int batch = std::min(config.batch_size, k);
    const int first_layer = backbone.config.first_lora_layer();
    std::vector<int> labels;
    for (int step = 0; step < config.phase3_steps; ++step) {
        const auto idx = draw_batch(rng, cache.size(), batch);
        const RaggedRows trunk = cache.batch(idx, labels);
        num::GradientTape tape;
        const PromptSet prompts = assemble_prompts(theta0, slow, first_layer, out.factors, s);
        const Tensor loss = num::cross_entropy_from_logits(forward_from_trunk(backbone, trunk, &prompts), labels);
        out.loss_trace.push_back(finite_or_throw(loss, target.task, step));
        tape.backward(loss);
        adam.step();
    }
    release(params);
    out.metrics = evaluate(backbone, theta0, slow, out.factors, s, target.unseen);
    return out;
}

void write_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> rows) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    os << "step,task,loss,penalty,mean_abs_tanh_gate\n";
    char buf[160];
    for (const TraceRow& r : rows) {
        std::snprintf(buf, sizeof buf, "%d,%s,%.9g,%.9g,%.9g\n", r.step, r.task.c_str(), r.loss, r.penalty,
                      r.mean_abs_tanh_gate);
        os << buf;
    }
    if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace talora
