// SPDX-License-Identifier: Apache-2.0
#include "talora/backbone.hpp"

#include <cmath>
#include <map>
#include <random>

#include "talora/attention.hpp"
#include "talora/errors.hpp"
#include "talora/numerics/ops.hpp"
#include "talora/numerics/optim.hpp"
#include "talora/numerics/tape.hpp"

namespace talora {

using num::Tensor;

namespace {

constexpr double kInitStd = 0.02;

Tensor gaussian(std::mt19937_64& rng, num::Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> values(num::shape_numel(shape));
    for (double& v : values) v = dist(rng);
    return Tensor(std::move(shape), std::move(values));
}

std::size_t to_size(int v) { return static_cast<std::size_t>(v); }

template <typename Fn>
void for_each_tensor(const BackboneWeights& w, Fn&& fn) {
    fn("backbone.token_embedding", w.token_embedding);
    fn("backbone.position_embedding", w.position_embedding);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const LayerWeights& L = w.layers[l];
        const std::string p = "backbone.l" + std::to_string(l) + ".";
        fn(p + "ln1_gamma", L.ln1_gamma);
        fn(p + "ln1_beta", L.ln1_beta);
        fn(p + "wq", L.wq);
        fn(p + "wk", L.wk);
        fn(p + "wv", L.wv);
        fn(p + "wo", L.wo);
        fn(p + "ln2_gamma", L.ln2_gamma);
        fn(p + "ln2_beta", L.ln2_beta);
        fn(p + "w1", L.w1);
        fn(p + "b1", L.b1);
        fn(p + "w2", L.w2);
        fn(p + "b2", L.b2);
    }
    fn("backbone.final_gamma", w.final_gamma);
    fn("backbone.final_beta", w.final_beta);
    fn("backbone.head_weight", w.head_weight);
    fn("backbone.head_bias", w.head_bias);
}

void check_tokens(const BackboneConfig& config, std::span<const std::vector<int>> tokens) {
    if (tokens.empty()) throw ArgumentError("forward: empty batch");
    for (const auto& seq : tokens) {
        if (seq.empty()) throw ArgumentError("forward: empty sequence");
        if (seq.size() > to_size(config.max_seq_len)) {
            throw DimensionError("forward: sequence of length " + std::to_string(seq.size()) +
                                 " exceeds max_seq_len " + std::to_string(config.max_seq_len));
        }
        for (int t : seq) {
            if (t < 0 || t >= config.vocab_size) {
                throw ArgumentError("forward: token id " + std::to_string(t) + " outside vocabulary");
            }
        }
    }
}

/// Per-layer prompt lookup after validating the set against the config.
std::vector<const LayerPrompt*> index_prompts(const BackboneConfig& config, const PromptSet* prompts) {
    std::vector<const LayerPrompt*> by_layer(to_size(config.n_layers), nullptr);
    if (!prompts) return by_layer;
    for (const LayerPrompt& p : *prompts) {
        if (p.layer < 0 || p.layer >= config.n_layers || !config.is_lora_layer(p.layer)) {
            throw ArgumentError("forward: prompt supplied for non-lora layer " + std::to_string(p.layer));
        }
        if (by_layer[to_size(p.layer)]) {
            throw ArgumentError("forward: duplicate prompt for layer " + std::to_string(p.layer));
        }
        if (p.prompt.rank() != 2 || p.prompt.rows() != to_size(config.prompt_len) ||
            p.prompt.cols() != to_size(config.model_dim)) {
            throw DimensionError("forward: prompt for layer " + std::to_string(p.layer) + " has shape " +
                                 num::shape_to_string(p.prompt.shape()) + ", expected (" +
                                 std::to_string(config.prompt_len) + "," + std::to_string(config.model_dim) + ")");
        }
        if (p.gate.numel() != 1 && p.gate.numel() != to_size(config.n_heads)) {
            throw DimensionError("forward: gate for layer " + std::to_string(p.layer) + " has shape " +
                                 num::shape_to_string(p.gate.shape()));
        }
        by_layer[to_size(p.layer)] = &p;
    }
    for (int l = config.first_lora_layer(); l < config.n_layers; ++l) {
        if (!by_layer[to_size(l)]) {
            throw ArgumentError("forward: prompts must cover every lora layer; layer " + std::to_string(l) +
                                " is missing");
        }
    }
    return by_layer;
}

Tensor embed(const BackboneWeights& w, std::span<const std::vector<int>> tokens, std::vector<std::size_t>& offsets) {
    std::vector<int> ids, positions;
    offsets.assign(1, 0);
    for (const auto& seq : tokens) {
        for (std::size_t i = 0; i < seq.size(); ++i) {
            ids.push_back(seq[i]);
            positions.push_back(static_cast<int>(i));
        }
        offsets.push_back(ids.size());
    }
    return num::add(num::gather_rows(w.token_embedding, ids), num::gather_rows(w.position_embedding, positions));
}

Tensor attention_block(const BackboneWeights& w, const LayerWeights& L, const Tensor& x,
                       std::span<const std::size_t> offsets, const LayerPrompt* prompt) {
    const Tensor xn = num::layer_norm(x, L.ln1_gamma, L.ln1_beta);
    const Tensor q = num::matmul(xn, L.wq);
    const Tensor k = num::matmul(xn, L.wk);
    const Tensor v = num::matmul(xn, L.wv);
    const std::size_t heads = to_size(w.config.n_heads);
    if (!prompt) return num::matmul(multi_head_attention(q, k, v, offsets, heads), L.wo);
    const Tensor kp = num::matmul(prompt->prompt, L.wk);
    const Tensor vp = num::matmul(prompt->prompt, L.wv);
    const PromptPrefix prefix{&kp, &vp, &prompt->gate};
    return num::matmul(multi_head_attention(q, k, v, offsets, heads, &prefix), L.wo);
}

Tensor run_layer(const BackboneWeights& w, const LayerWeights& L, const Tensor& x,
                 std::span<const std::size_t> offsets, const LayerPrompt* prompt) {
    const Tensor h = num::add(x, attention_block(w, L, x, offsets, prompt));
    const Tensor hn = num::layer_norm(h, L.ln2_gamma, L.ln2_beta);
    const Tensor ff = num::gelu(num::add_broadcast(num::matmul(hn, L.w1), L.b1));
    return num::add(h, num::add_broadcast(num::matmul(ff, L.w2), L.b2));
}

Tensor output_head(const BackboneWeights& w, const Tensor& x) {
    const Tensor xn = num::layer_norm(x, w.final_gamma, w.final_beta);
    return num::add_broadcast(num::matmul(xn, w.head_weight), w.head_bias);
}

}  // namespace

void BackboneConfig::validate() const {
    if (vocab_size < 2) throw ArgumentError("backbone config: vocab_size must be at least 2");
    if (model_dim < 1 || n_heads < 1 || model_dim % n_heads != 0) {
        throw ArgumentError("backbone config: model_dim " + std::to_string(model_dim) + " is not divisible by " +
                            std::to_string(n_heads) + " heads");
    }
    if (n_layers < 1) throw ArgumentError("backbone config: n_layers must be positive");
    if (lora_layers < 1 || lora_layers > n_layers) {
        throw ArgumentError("backbone config: lora_layers must lie in [1, n_layers]");
    }
    if (prompt_len < 1) throw ArgumentError("backbone config: prompt_len must be positive");
    if (max_seq_len < 1) throw ArgumentError("backbone config: max_seq_len must be positive");
    if (ffn_mult < 1) throw ArgumentError("backbone config: ffn_mult must be positive");
    if (task_markers && vocab_size <= vocab::kFirstSymbol) {
        throw ArgumentError("backbone config: vocabulary has no room for task markers");
    }
}

std::size_t backbone_parameter_count(const BackboneConfig& c) {
    const std::size_t V = to_size(c.vocab_size), H = to_size(c.model_dim), S = to_size(c.max_seq_len);
    const std::size_t F = H * to_size(c.ffn_mult);
    const std::size_t per_layer = 2 * H + 4 * H * H + 2 * H + H * F + F + F * H + H;
    return V * H + S * H + to_size(c.n_layers) * per_layer + 2 * H + H * V + V;
}

std::vector<std::pair<std::string, Tensor>> BackboneWeights::named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for_each_tensor(*this, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, t); });
    return out;
}

std::size_t BackboneWeights::parameter_count() const {
    std::size_t n = 0;
    for_each_tensor(*this, [&](const std::string&, const Tensor& t) { n += t.numel(); });
    return n;
}

BackboneWeights BackboneWeights::clone() const {
    const auto named = named_tensors();
    std::vector<std::pair<std::string, Tensor>> copies;
    copies.reserve(named.size());
    for (const auto& [name, t] : named) copies.emplace_back(name, t.clone());
    return from_named(config, copies);
}

void BackboneWeights::freeze() {
    for (auto& [name, t] : named_tensors()) {
        Tensor handle = t;
        handle.freeze();
    }
}

bool BackboneWeights::frozen() const {
    bool all = true;
    for_each_tensor(*this, [&](const std::string&, const Tensor& t) { all = all && t.frozen(); });
    return all;
}

bool BackboneWeights::bit_equal(const BackboneWeights& other) const {
    const auto a = named_tensors();
    const auto b = other.named_tensors();
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].first != b[i].first || !a[i].second.bit_equal(b[i].second)) return false;
    }
    return true;
}

BackboneWeights BackboneWeights::from_named(const BackboneConfig& config,
                                            std::span<const std::pair<std::string, Tensor>> tensors) {
    config.validate();
    std::map<std::string, Tensor> lookup;
    for (const auto& [name, t] : tensors) lookup[name] = t;
    BackboneWeights w = init_backbone(config, 0);
    auto assign = [&](const std::string& name, Tensor& slot) {
        const auto it = lookup.find(name);
        if (it == lookup.end()) throw ArgumentError("backbone weights: missing tensor " + name);
        if (it->second.shape() != slot.shape()) {
            throw DimensionError("backbone weights: tensor " + name + " has shape " +
                                 num::shape_to_string(it->second.shape()) + ", expected " +
                                 num::shape_to_string(slot.shape()));
        }
        slot = it->second;
    };
    assign("backbone.token_embedding", w.token_embedding);
    assign("backbone.position_embedding", w.position_embedding);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        LayerWeights& L = w.layers[l];
        const std::string p = "backbone.l" + std::to_string(l) + ".";
        assign(p + "ln1_gamma", L.ln1_gamma);
        assign(p + "ln1_beta", L.ln1_beta);
        assign(p + "wq", L.wq);
        assign(p + "wk", L.wk);
        assign(p + "wv", L.wv);
        assign(p + "wo", L.wo);
        assign(p + "ln2_gamma", L.ln2_gamma);
        assign(p + "ln2_beta", L.ln2_beta);
        assign(p + "w1", L.w1);
        assign(p + "b1", L.b1);
        assign(p + "w2", L.w2);
        assign(p + "b2", L.b2);
    }
    assign("backbone.final_gamma", w.final_gamma);
    assign("backbone.final_beta", w.final_beta);
    assign("backbone.head_weight", w.head_weight);
    assign("backbone.head_bias", w.head_bias);
    return w;
}

BackboneWeights init_backbone(const BackboneConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    const std::size_t V = to_size(config.vocab_size), H = to_size(config.model_dim);
    const std::size_t F = H * to_size(config.ffn_mult);
    BackboneWeights w;
    w.config = config;
    w.token_embedding = gaussian(rng, {V, H}, kInitStd);
    w.position_embedding = gaussian(rng, {to_size(config.max_seq_len), H}, kInitStd);
    for (int l = 0; l < config.n_layers; ++l) {
        LayerWeights L;
        L.ln1_gamma = Tensor::filled({H}, 1.0);
        L.ln1_beta = Tensor::zeros({H});
        L.wq = gaussian(rng, {H, H}, kInitStd);
        L.wk = gaussian(rng, {H, H}, kInitStd);
        L.wv = gaussian(rng, {H, H}, kInitStd);
        L.wo = gaussian(rng, {H, H}, kInitStd);
        L.ln2_gamma = Tensor::filled({H}, 1.0);
        L.ln2_beta = Tensor::zeros({H});
        L.w1 = gaussian(rng, {H, F}, kInitStd);
        L.b1 = Tensor::zeros({F});
        L.w2 = gaussian(rng, {F, H}, kInitStd);
        L.b2 = Tensor::zeros({H});
        w.layers.push_back(std::move(L));
    }
    w.final_gamma = Tensor::filled({H}, 1.0);
    w.final_beta = Tensor::zeros({H});
    w.head_weight = gaussian(rng, {H, V}, kInitStd);
    w.head_bias = Tensor::zeros({V});
    return w;
}

RaggedRows forward_ragged(const BackboneWeights& weights, std::span<const std::vector<int>> tokens,
                          const PromptSet* prompts) {
    const BackboneConfig& c = weights.config;
    check_tokens(c, tokens);
    const auto by_layer = index_prompts(c, prompts);
    RaggedRows out;
    Tensor x = embed(weights, tokens, out.offsets);
    for (int l = 0; l < c.n_layers; ++l) x = run_layer(weights, weights.layers[to_size(l)], x, out.offsets, by_layer[to_size(l)]);
    out.rows = output_head(weights, x);
    return out;
}

Tensor forward(const BackboneWeights& weights, std::span<const std::vector<int>> tokens, const PromptSet* prompts) {
    if (tokens.empty()) throw ArgumentError("forward: empty batch");
    const std::size_t len = tokens.front().size();
    for (const auto& seq : tokens) {
        if (seq.size() != len) throw DimensionError("forward: sequences in a batch must share one length");
    }
    RaggedRows r = forward_ragged(weights, tokens, prompts);
    return num::reshape(r.rows, {tokens.size(), len, to_size(weights.config.vocab_size)});
}

RaggedRows forward_trunk(const BackboneWeights& weights, std::span<const std::vector<int>> tokens) {
    const BackboneConfig& c = weights.config;
    check_tokens(c, tokens);
    RaggedRows out;
    Tensor x = embed(weights, tokens, out.offsets);
    for (int l = 0; l < c.first_lora_layer(); ++l) x = run_layer(weights, weights.layers[to_size(l)], x, out.offsets, nullptr);
    out.rows = x;
    return out;
}

Tensor forward_from_trunk(const BackboneWeights& weights, const RaggedRows& trunk, const PromptSet* prompts) {
    const BackboneConfig& c = weights.config;
    const auto by_layer = index_prompts(c, prompts);
    Tensor x = trunk.rows;
    for (int l = c.first_lora_layer(); l < c.n_layers; ++l) {
        x = run_layer(weights, weights.layers[to_size(l)], x, trunk.offsets, by_layer[to_size(l)]);
    }
    return output_head(weights, x);
}

std::optional<int> prompted_lead_token(const BackboneConfig& config) {
    if (config.task_markers) return vocab::kNullMarker;
    return std::nullopt;
}

PretrainResult pretrain_backbone(const BackboneWeights& initial, std::span<const TaskDataset> mixture,
                                 const PretrainOptions& options) {
    if (mixture.empty()) throw ArgumentError("pretrain_backbone: empty task mixture");
    if (options.steps < 0 || options.batch_size < 1) throw ArgumentError("pretrain_backbone: invalid schedule");
    const BackboneConfig& c = initial.config;
    if (c.task_markers && mixture.size() > to_size(vocab::kMaxMarkers)) {
        throw ArgumentError("pretrain_backbone: at most " + std::to_string(vocab::kMaxMarkers) +
                            " tasks can carry markers");
    }
    for (const TaskDataset& ds : mixture) {
        if (ds.train.empty()) throw ArgumentError("pretrain_backbone: task " + ds.task + " has no training samples");
    }
    PretrainResult result{initial.clone(), {}};
    BackboneWeights& w = result.weights;
    num::Adam adam;
    std::vector<Tensor> params;
    for (auto& [name, t] : w.named_tensors()) params.push_back(t);
    adam.add_group("backbone", params, options.learning_rate);

    std::mt19937_64 rng(options.seed);
    std::uniform_int_distribution<std::size_t> pick_task(0, mixture.size() - 1);
    std::bernoulli_distribution use_null(options.null_marker_rate);
    for (int step = 0; step < options.steps; ++step) {
        std::vector<std::vector<int>> tokens;
        std::vector<int> labels;
        for (int b = 0; b < options.batch_size; ++b) {
            const std::size_t task = pick_task(rng);
            const auto& train = mixture[task].train;
            const Sample& s = train[std::uniform_int_distribution<std::size_t>(0, train.size() - 1)(rng)];
            std::optional<int> lead;
            if (c.task_markers) {
                lead = use_null(rng) ? vocab::kNullMarker : vocab::kFirstMarker + static_cast<int>(task);
            }
            EncodedSample enc = encode_sample(s, lead);
            labels.insert(labels.end(), enc.labels.begin(), enc.labels.end());
            tokens.push_back(std::move(enc.tokens));
        }
        num::GradientTape tape;
        const RaggedRows logits = forward_ragged(w, tokens);
        const Tensor loss = num::cross_entropy_from_logits(logits.rows, labels);
        const double value = loss.item();
        if (!std::isfinite(value)) {
            throw TrainingError("pretrain_backbone: loss diverged at step " + std::to_string(step));
        }
        result.loss_trace.push_back(value);
        tape.backward(loss);
        adam.step();
    }
    for (Tensor& p : params) p.set_requires_grad(false);
    w.freeze();
    return result;
}

}  // namespace talora
