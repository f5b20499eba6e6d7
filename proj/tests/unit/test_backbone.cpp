// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "helpers.hpp"
#include "talora/attention.hpp"
#include "talora/backbone.hpp"
#include "talora/errors.hpp"
#include "talora/numerics/gradcheck.hpp"
#include "talora/numerics/ops.hpp"
#include "talora/numerics/tape.hpp"
#include "talora/pipeline.hpp"

using namespace talora;
using num::Tensor;
using talora::test::param;
using talora::test::randn;

namespace {

BackboneConfig small_config() {
    BackboneConfig c;
    c.model_dim = 16;
    c.n_heads = 2;
    c.n_layers = 3;
    c.lora_layers = 2;
    c.prompt_len = 3;
    c.max_seq_len = 16;
    return c;
}

/// Randomizes the layer-norm affines and biases so no weight is at a special value.
BackboneWeights random_backbone(const BackboneConfig& c, std::uint64_t seed) {
    BackboneWeights w = init_backbone(c, seed);
    std::mt19937_64 rng(seed + 1);
    std::vector<std::pair<std::string, Tensor>> named;
    for (const auto& [name, t] : w.named_tensors()) named.emplace_back(name, randn(t.shape(), rng, 0.3));
    return BackboneWeights::from_named(c, named);
}

std::vector<std::vector<int>> random_tokens(const BackboneConfig& c, std::size_t batch, std::size_t len,
                                            std::mt19937_64& rng) {
    std::uniform_int_distribution<int> tok(0, c.vocab_size - 1);
    std::vector<std::vector<int>> out(batch, std::vector<int>(len));
    for (auto& seq : out) {
        for (int& t : seq) t = tok(rng);
    }
    return out;
}

PromptSet random_prompts(const BackboneConfig& c, std::mt19937_64& rng, double gate) {
    PromptSet set;
    for (int l = c.first_lora_layer(); l < c.n_layers; ++l) {
        set.push_back({l, randn({std::size_t(c.prompt_len), std::size_t(c.model_dim)}, rng), Tensor::scalar(gate)});
    }
    return set;
}

/// Per-sequence, per-head transformer built from the single-head reference ops.
Tensor reference_forward(const BackboneWeights& w, const std::vector<int>& seq, const PromptSet* prompts) {
    const BackboneConfig& c = w.config;
    std::vector<int> pos(seq.size());
    for (std::size_t i = 0; i < seq.size(); ++i) pos[i] = int(i);
    Tensor x = num::add(num::gather_rows(w.token_embedding, seq), num::gather_rows(w.position_embedding, pos));
    const std::size_t d = std::size_t(c.head_dim());
    for (int l = 0; l < c.n_layers; ++l) {
        const LayerWeights& L = w.layers[std::size_t(l)];
        const LayerPrompt* p = nullptr;
        if (prompts) {
            for (const LayerPrompt& lp : *prompts) {
                if (lp.layer == l) p = &lp;
            }
        }
        const Tensor xn = num::layer_norm(x, L.ln1_gamma, L.ln1_beta);
        const Tensor q = num::matmul(xn, L.wq), k = num::matmul(xn, L.wk), v = num::matmul(xn, L.wv);
        std::vector<Tensor> heads;
        for (std::size_t h = 0; h < std::size_t(c.n_heads); ++h) {
            const Tensor qh = num::slice_cols(q, h * d, (h + 1) * d);
            const Tensor kh = num::slice_cols(k, h * d, (h + 1) * d);
            const Tensor vh = num::slice_cols(v, h * d, (h + 1) * d);
            if (!p) {
                heads.push_back(causal_attention(qh, kh, vh));
                continue;
            }
            const Tensor kp = num::slice_cols(num::matmul(p->prompt, L.wk), h * d, (h + 1) * d);
            const Tensor vp = num::slice_cols(num::matmul(p->prompt, L.wv), h * d, (h + 1) * d);
            const Tensor ks[] = {kp, kh};
            const Tensor vs[] = {vp, vh};
            const Tensor g = p->gate.numel() == 1 ? p->gate : num::element(p->gate, h);
            heads.push_back(zero_init_attention(qh, num::concat_rows(ks), num::concat_rows(vs), kp.rows(), g));
        }
        const Tensor hcat = num::add(x, num::matmul(num::concat_cols(heads), L.wo));
        const Tensor hn = num::layer_norm(hcat, L.ln2_gamma, L.ln2_beta);
        const Tensor ff = num::gelu(num::add_broadcast(num::matmul(hn, L.w1), L.b1));
        x = num::add(hcat, num::add_broadcast(num::matmul(ff, L.w2), L.b2));
    }
    const Tensor xn = num::layer_norm(x, w.final_gamma, w.final_beta);
    return num::add_broadcast(num::matmul(xn, w.head_weight), w.head_bias);
}

}  // namespace

TEST_SUITE("attention") {
    TEST_CASE("zero gate reduces to causal attention over the tokens") {
        std::mt19937_64 rng(20);
        const Tensor q = randn({5, 4}, rng), k = randn({8, 4}, rng), v = randn({8, 4}, rng);
        const Tensor out = zero_init_attention(q, k, v, 3, Tensor::scalar(0.0));
        const Tensor ref = causal_attention(q, num::slice_rows(k, 3, 8), num::slice_rows(v, 3, 8));
        CHECK(num::max_abs_diff(out, ref) < 1e-15);
    }

    TEST_CASE("saturated gate adds the full prompt term") {
        std::mt19937_64 rng(21);
        const Tensor q = randn({4, 3}, rng), k = randn({6, 3}, rng), v = randn({6, 3}, rng);
        const Tensor out = zero_init_attention(q, k, v, 2, Tensor::scalar(20.0));
        const Tensor logits = num::scaled_dot(q, k);
        const std::size_t split[] = {2};
        const Tensor s = num::softmax_segments(logits, split, num::CausalMask{1, 0});
        const Tensor ref = num::matmul(s, v);
        CHECK(num::max_abs_diff(out, ref) < 1e-15);
    }

    TEST_CASE("single-column segments with tanh(g) = 0.5") {
        const Tensor q = Tensor::matrix(1, 2, {0.0, 0.0});
        const Tensor k = Tensor::matrix(2, 2, {0.0, 0.0, 0.0, 0.0});
        const Tensor v = Tensor::matrix(2, 2, {2.0, 4.0, 1.0, -3.0});
        const Tensor out = zero_init_attention(q, k, v, 1, Tensor::scalar(std::atanh(0.5)));
        CHECK(out.data()[0] == doctest::Approx(0.5 * 2.0 + 1.0).epsilon(1e-15));
        CHECK(out.data()[1] == doctest::Approx(0.5 * 4.0 - 3.0).epsilon(1e-15));
    }

    TEST_CASE("multi-head op matches the per-head reference") {
        std::mt19937_64 rng(22);
        const std::vector<std::size_t> offsets = {0, 5, 7, 13};
        const Tensor q = randn({13, 8}, rng), k = randn({13, 8}, rng), v = randn({13, 8}, rng);
        const Tensor kp = randn({3, 8}, rng), vp = randn({3, 8}, rng);
        for (const Tensor& gate : {Tensor::scalar(0.4), Tensor::vector({0.3, -1.2})}) {
            const PromptPrefix prefix{&kp, &vp, &gate};
            for (const PromptPrefix* pre : {static_cast<const PromptPrefix*>(nullptr), &prefix}) {
                const Tensor fused = multi_head_attention(q, k, v, offsets, 2, pre);
                std::vector<Tensor> seqs;
                for (std::size_t b = 0; b + 1 < offsets.size(); ++b) {
                    std::vector<Tensor> heads;
                    for (std::size_t h = 0; h < 2; ++h) {
                        auto cut = [&](const Tensor& t) {
                            return num::slice_cols(num::slice_rows(t, offsets[b], offsets[b + 1]), h * 4, h * 4 + 4);
                        };
                        if (!pre) {
                            heads.push_back(causal_attention(cut(q), cut(k), cut(v)));
                            continue;
                        }
                        const Tensor ks[] = {num::slice_cols(kp, h * 4, h * 4 + 4), cut(k)};
                        const Tensor vs[] = {num::slice_cols(vp, h * 4, h * 4 + 4), cut(v)};
                        const Tensor g = gate.numel() == 1 ? gate : num::element(gate, h);
                        heads.push_back(zero_init_attention(cut(q), num::concat_rows(ks), num::concat_rows(vs), 3, g));
                    }
                    seqs.push_back(num::concat_cols(heads));
                }
                CHECK(num::max_abs_diff(fused, num::concat_rows(seqs)) < 1e-12);
            }
        }
    }

    TEST_CASE("multi-head op gradients match central differences") {
        std::mt19937_64 rng(23);
        const std::vector<std::size_t> offsets = {0, 3, 7};
        std::vector<Tensor> p = {param({7, 4}, rng), param({7, 4}, rng), param({7, 4}, rng),
                                 param({2, 4}, rng), param({2, 4}, rng), param({2}, rng)};
        const Tensor weights = randn({7, 4}, rng);
        auto loss = [&] {
            const PromptPrefix prefix{&p[3], &p[4], &p[5]};
            return num::dot(multi_head_attention(p[0], p[1], p[2], offsets, 2, &prefix), weights);
        };
        const num::GradCheckReport report = num::finite_diff_check(loss, p);
        for (double e : report.per_param) CHECK(e < 1e-6);
    }
}

TEST_SUITE("backbone") {
    TEST_CASE("init is deterministic in the seed") {
        const BackboneConfig c;
        CHECK(init_backbone(c, 5).bit_equal(init_backbone(c, 5)));
        CHECK_FALSE(init_backbone(c, 5).bit_equal(init_backbone(c, 6)));
    }

    TEST_CASE("parameter count matches the hand formula") {
        const BackboneConfig c;
        const std::size_t V = 32, H = 64, S = 64, N = 8, F = 4 * H;
        // Embeddings, N blocks (two layer norms, four projections, two-layer MLP), final norm, head.
        const std::size_t per_block = 2 * H + 4 * H * H + 2 * H + H * F + F + F * H + H;
        const std::size_t expected = V * H + S * H + N * per_block + 2 * H + H * V + V;
        CHECK(expected == 406176);
        CHECK(init_backbone(c, 1).parameter_count() == expected);
        CHECK(backbone_parameter_count(c) == expected);
    }

    TEST_CASE("config validation") {
        BackboneConfig c;
        c.n_heads = 5;
        CHECK_THROWS_AS(c.validate(), ArgumentError);
        c = BackboneConfig{};
        c.lora_layers = 9;
        CHECK_THROWS_AS(c.validate(), ArgumentError);
        c = BackboneConfig{};
        c.prompt_len = 0;
        CHECK_THROWS_AS(c.validate(), ArgumentError);
    }

    TEST_CASE("logits shape") {
        const BackboneConfig c;
        std::mt19937_64 rng(24);
        const auto tokens = random_tokens(c, 2, 8, rng);
        CHECK(forward(init_backbone(c, 1), tokens).shape() == num::Shape{2, 8, 32});
    }

    TEST_CASE("prompt-free forward equals the reference transformer") {
        const BackboneConfig c = small_config();
        const BackboneWeights w = random_backbone(c, 25);
        std::mt19937_64 rng(26);
        const std::vector<std::vector<int>> tokens = {{1, 5, 7, 2}, {9, 3, 3, 3, 0, 14, 6}};
        const RaggedRows out = forward_ragged(w, tokens);
        for (std::size_t b = 0; b < tokens.size(); ++b) {
            const Tensor ref = reference_forward(w, tokens[b], nullptr);
            CHECK(num::max_abs_diff(num::slice_rows(out.rows, out.offsets[b], out.offsets[b + 1]), ref) < 1e-12);
        }
    }

    TEST_CASE("prompted forward equals the reference transformer") {
        BackboneConfig c = small_config();
        const BackboneWeights w = random_backbone(c, 27);
        std::mt19937_64 rng(28);
        const PromptSet prompts = random_prompts(c, rng, 0.7);
        const std::vector<std::vector<int>> tokens = {{4, 4, 1}, {0, 2, 8, 31, 17}};
        const RaggedRows out = forward_ragged(w, tokens, &prompts);
        for (std::size_t b = 0; b < tokens.size(); ++b) {
            const Tensor ref = reference_forward(w, tokens[b], &prompts);
            CHECK(num::max_abs_diff(num::slice_rows(out.rows, out.offsets[b], out.offsets[b + 1]), ref) < 1e-12);
        }
    }

    TEST_CASE("zero gates leave the logits unchanged") {
        const BackboneConfig c;
        const BackboneWeights w = init_backbone(c, 29);
        std::mt19937_64 rng(30);
        const auto tokens = random_tokens(c, 3, 10, rng);
        const PromptSet prompts = random_prompts(c, rng, 0.0);
        CHECK(num::max_abs_diff(forward(w, tokens, &prompts), forward(w, tokens)) < 1e-10);
    }

    TEST_CASE("trunk split equals the full forward") {
        const BackboneConfig c = small_config();
        const BackboneWeights w = random_backbone(c, 31);
        std::mt19937_64 rng(32);
        const PromptSet prompts = random_prompts(c, rng, -0.4);
        const std::vector<std::vector<int>> tokens = {{1, 2, 3}, {7, 7, 7, 7, 7}};
        const Tensor split = forward_from_trunk(w, forward_trunk(w, tokens), &prompts);
        CHECK(split.bit_equal(forward_ragged(w, tokens, &prompts).rows));
    }

    TEST_CASE("perturbing position j never changes earlier logits") {
        const BackboneConfig c = small_config();
        const BackboneWeights w = random_backbone(c, 33);
        std::mt19937_64 rng(34);
        const PromptSet prompts = random_prompts(c, rng, 0.9);
        const auto base = random_tokens(c, 1, 9, rng);
        for (const PromptSet* p : {static_cast<const PromptSet*>(nullptr), &prompts}) {
            const Tensor ref = forward(w, base, p);
            for (std::size_t j = 0; j < 9; ++j) {
                auto changed = base;
                changed[0][j] = (changed[0][j] + 1) % c.vocab_size;
                const Tensor out = forward(w, changed, p);
                const std::size_t row = std::size_t(c.vocab_size);
                for (std::size_t i = 0; i < j * row; ++i) CHECK(out.data()[i] == ref.data()[i]);
                bool moved = false;
                for (std::size_t i = j * row; i < (j + 1) * row; ++i) moved = moved || out.data()[i] != ref.data()[i];
                CHECK(moved);
            }
        }
    }

    TEST_CASE("prompt validation") {
        const BackboneConfig c = small_config();
        const BackboneWeights w = init_backbone(c, 1);
        std::mt19937_64 rng(35);
        const std::vector<std::vector<int>> tokens = {{1, 2}};
        PromptSet missing = random_prompts(c, rng, 0.0);
        missing.pop_back();
        CHECK_THROWS_AS(forward(w, tokens, &missing), ArgumentError);
        PromptSet early = random_prompts(c, rng, 0.0);
        early[0].layer = 0;
        CHECK_THROWS_AS(forward(w, tokens, &early), ArgumentError);
        const std::vector<std::vector<int>> too_long = {std::vector<int>(17, 1)};
        CHECK_THROWS_AS(forward(w, too_long), DimensionError);
        const std::vector<std::vector<int>> bad_id = {{1, 32}};
        CHECK_THROWS_AS(forward(w, bad_id), ArgumentError);
    }

    TEST_CASE("zero pre-training steps leave weights unchanged and frozen") {
        const BackboneConfig c = small_config();
        const BackboneWeights w = init_backbone(c, 36);
        const TaskDataset d = generate_task(builtin_task("copy"), 1, 50);
        PretrainOptions o;
        o.steps = 0;
        const PretrainResult r = pretrain_backbone(w, std::span(&d, 1), o);
        CHECK(r.weights.bit_equal(w));
        CHECK(r.weights.frozen());
        Tensor t = r.weights.token_embedding;
        CHECK_THROWS_AS(t.set_requires_grad(true), StateError);
    }

    TEST_CASE("500 desk-scale steps cut the loss by at least 25%") {
        const std::vector<TaskDataset> mixture = pretrain_mixture(SuiteConfig{});
        PretrainOptions o;
        o.steps = 500;
        o.seed = 7;
        const PretrainResult r = pretrain_backbone(init_backbone(BackboneConfig{}, 7), mixture, o);
        REQUIRE(r.loss_trace.size() == 500);
        double tail = 0.0;
        for (std::size_t s = 480; s < 500; ++s) tail += r.loss_trace[s] / 20.0;
        MESSAGE("step 0 loss " << r.loss_trace.front() << ", mean of last 20 steps " << tail);
        CHECK(tail <= 0.75 * r.loss_trace.front());
    }
}
