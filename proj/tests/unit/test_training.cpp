// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "helpers.hpp"
#include "talora/errors.hpp"
#include "talora/numerics/gradcheck.hpp"
#include "talora/numerics/ops.hpp"
#include "talora/training.hpp"

using namespace talora;
using num::Tensor;

namespace {

BackboneConfig tiny_config() {
    BackboneConfig c;
    c.model_dim = 16;
    c.n_heads = 2;
    c.n_layers = 3;
    c.lora_layers = 2;
    c.prompt_len = 3;
    c.max_seq_len = 32;
    return c;
}

BackboneWeights tiny_backbone() {
    BackboneWeights w = init_backbone(tiny_config(), 3);
    w.freeze();
    return w;
}

std::vector<TaskDataset> tiny_tasks(std::size_t count = 40) {
    return {generate_task(builtin_task("copy"), 1, count), generate_task(builtin_task("reverse"), 2, count)};
}

TrainConfig quick_config() {
    TrainConfig c;
    c.phase1_steps = 20;
    c.phase2_steps = 20;
    c.phase3_steps = 10;
    c.batch_size = 4;
    c.seed = 11;
    c.snapshot_every = 5;
    return c;
}

double window_mean(const std::vector<double>& xs, std::size_t begin, std::size_t end) {
    return std::accumulate(xs.begin() + long(begin), xs.begin() + long(end), 0.0) / double(end - begin);
}

bool all_bit_equal(std::span<const Tensor> a, std::span<const Tensor> b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!a[i].bit_equal(b[i])) return false;
    }
    return true;
}

std::vector<Tensor> flat_fast(const LoraFactors& f) {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < f.task_count(); ++i) {
        out.insert(out.end(), f.u[i].begin(), f.u[i].end());
        out.insert(out.end(), f.v[i].begin(), f.v[i].end());
    }
    out.insert(out.end(), f.gates.begin(), f.gates.end());
    return out;
}

}  // namespace

TEST_SUITE("train config") {
    TEST_CASE("defaults") {
        const TrainConfig c;
        CHECK(c.lr_prompt == 5e-3);
        CHECK(c.lr_slow == 1e-4);
        CHECK(c.lr_fast == 1e-3);
        CHECK(c.lambda == 1e-3);
        CHECK(c.phase1_steps == 1000);
        CHECK(c.phase2_steps == 2000);
        CHECK(c.batch_size == 16);
        CHECK(c.snapshot_every == 100);
    }

    TEST_CASE("json round trip") {
        TrainConfig c = quick_config();
        c.lambda = 0.25;
        c.lora.rank = 6;
        c.lora.per_head_gates = true;
        const TrainConfig back = train_config_from_json(to_json(c));
        CHECK(to_json(back) == to_json(c));
        const BackboneConfig b = tiny_config();
        CHECK(to_json(backbone_config_from_json(to_json(b))) == to_json(b));
    }

    TEST_CASE("validation") {
        TrainConfig c;
        c.lr_fast = -1.0;
        CHECK_THROWS_AS(c.validate(), ArgumentError);
        c = TrainConfig{};
        c.lr_fast = 0.0;
        CHECK_NOTHROW(c.validate());
        c.batch_size = 0;
        CHECK_THROWS_AS(c.validate(), ArgumentError);
        c = TrainConfig{};
        c.lora.rank = 0;
        CHECK_THROWS_AS(c.validate(), ArgumentError);
    }
}

TEST_SUITE("phase 1") {
    TEST_CASE("zero steps keep the random initialization") {
        const BackboneWeights w = tiny_backbone();
        const auto tasks = tiny_tasks();
        TrainConfig c = quick_config();
        c.phase1_steps = 0;
        const BasePromptResult r = train_base_prompts(w, tasks, c);
        const PromptBank init = PromptBank::random(w.config, {"copy", "reverse"}, c.seed, c.prompt_init_std);
        for (std::size_t i = 0; i < 2; ++i) CHECK(all_bit_equal(r.bank.theta[i], init.theta[i]));
        CHECK(r.snapshots.size() == 1);
    }

    TEST_CASE("loss falls on every task") {
        const BackboneWeights w = tiny_backbone();
        const auto tasks = tiny_tasks();
        TrainConfig c = quick_config();
        c.phase1_steps = 150;
        c.lr_prompt = 2e-2;
        const BasePromptResult r = train_base_prompts(w, tasks, c);
        for (const auto& trace : r.loss_trace) CHECK(window_mean(trace, 130, 150) < window_mean(trace, 0, 20));
    }

    TEST_CASE("same seed gives a bitwise-identical bank") {
        const BackboneWeights w = tiny_backbone();
        const auto tasks = tiny_tasks();
        const BasePromptResult a = train_base_prompts(w, tasks, quick_config());
        const BasePromptResult b = train_base_prompts(w, tasks, quick_config());
        for (std::size_t i = 0; i < 2; ++i) CHECK(all_bit_equal(a.bank.theta[i], b.bank.theta[i]));
        CHECK(a.loss_trace == b.loss_trace);
    }

    TEST_CASE("bank mean and snapshots") {
        const BackboneWeights w = tiny_backbone();
        const BasePromptResult r = train_base_prompts(w, tiny_tasks(), quick_config());
        std::vector<int> steps;
        for (const BankSnapshot& s : r.snapshots) steps.push_back(s.step);
        CHECK(steps == std::vector<int>{0, 5, 10, 15, 20});
        CHECK(all_bit_equal(r.snapshots.back().theta[1], r.bank.theta[1]));
        for (std::size_t l = 0; l < r.bank.layer_count(); ++l) {
            for (std::size_t e = 0; e < r.bank.theta0[l].numel(); ++e) {
                const double mean = 0.5 * (r.bank.theta[0][l].data()[e] + r.bank.theta[1][l].data()[e]);
                CHECK(std::abs(r.bank.theta0[l].data()[e] - mean) < 1e-12);
            }
        }
    }

    TEST_CASE("backbone must be frozen and unchanged") {
        const BackboneWeights w = init_backbone(tiny_config(), 3);
        CHECK_THROWS_AS(train_base_prompts(w, tiny_tasks(), quick_config()), StateError);
        const BackboneWeights frozen = tiny_backbone();
        const BackboneWeights before = frozen.clone();
        train_base_prompts(frozen, tiny_tasks(), quick_config());
        CHECK(frozen.bit_equal(before));
    }
}

TEST_SUITE("phase 2") {
    TEST_CASE("zero lambda adds nothing to the loss") {
        const BackboneWeights w = tiny_backbone();
        auto tasks = tiny_tasks();
        for (TaskDataset& d : tasks) d.train.resize(1);
        const BasePromptResult base = train_base_prompts(w, tasks, quick_config());
        const LoraFactors f0 = LoraFactors::init(w.config, {"copy", "reverse"}, LoraOptions{}, 5);
        TrainConfig c = quick_config();
        c.lambda = 0.0;
        c.phase2_steps = 1;
        const TaloraResult r = train_talora(w, base.bank, f0, tasks, c);
        // A one-sample train split makes the first batch that sample repeated.
        const EncodedSample enc = encode_sample(tasks[0].train[0], prompted_lead_token(w.config));
        const std::vector<std::vector<int>> tokens = {enc.tokens};
        const PromptSet prompts = assemble_prompts(base.bank.theta0, f0, 0);
        const Tensor ce = num::cross_entropy_from_logits(forward_ragged(w, tokens, &prompts).rows, enc.labels);
        CHECK(r.trace[0].loss == doctest::Approx(ce.item()).epsilon(1e-12));
        CHECK(r.trace[0].penalty > 0.0);
        c.lambda = 0.5;
        const TaloraResult p = train_talora(w, base.bank, f0, tasks, c);
        CHECK(p.trace[0].loss == doctest::Approx(ce.item() + 0.5 * r.trace[0].penalty).epsilon(1e-12));
    }

    TEST_CASE("round-robin trace and opening gates") {
        const BackboneWeights w = tiny_backbone();
        const auto tasks = tiny_tasks();
        const BasePromptResult base = train_base_prompts(w, tasks, quick_config());
        const LoraFactors f0 = LoraFactors::init(w.config, {"copy", "reverse"}, LoraOptions{}, 5);
        TrainConfig c = quick_config();
        c.lr_fast = 1e-2;
        const TaloraResult r = train_talora(w, base.bank, f0, tasks, c);
        REQUIRE(r.trace.size() == 20);
        CHECK(r.trace[0].task == "copy");
        CHECK(r.trace[1].task == "reverse");
        CHECK(r.trace[0].mean_abs_tanh_gate == 0.0);
        CHECK(mean_abs_tanh(r.factors.gates) > 0.0);
    }

    TEST_CASE("per-group learning rates are wired") {
        const BackboneWeights w = tiny_backbone();
        const auto tasks = tiny_tasks();
        const BasePromptResult base = train_base_prompts(w, tasks, quick_config());
        LoraFactors f0 = LoraFactors::init(w.config, {"copy", "reverse"}, LoraOptions{}, 5);
        // With a closed gate the prompt, and hence B, receives no gradient.
        for (Tensor& g : f0.gates) g.mutable_data()[0] = 0.5;
        TrainConfig c = quick_config();
        c.lr_fast = 0.0;
        const TaloraResult frozen_fast = train_talora(w, base.bank, f0, tasks, c);
        CHECK(all_bit_equal(flat_fast(frozen_fast.factors), flat_fast(f0)));
        CHECK_FALSE(all_bit_equal(frozen_fast.factors.slow, f0.slow));
        c = quick_config();
        c.lr_slow = 0.0;
        const TaloraResult frozen_slow = train_talora(w, base.bank, f0, tasks, c);
        CHECK(all_bit_equal(frozen_slow.factors.slow, f0.slow));
        CHECK_FALSE(all_bit_equal(flat_fast(frozen_slow.factors), flat_fast(f0)));
    }

    TEST_CASE("backbone and theta0 stay bit-identical") {
        const BackboneWeights w = tiny_backbone();
        const BackboneWeights before = w.clone();
        const auto tasks = tiny_tasks();
        const BasePromptResult base = train_base_prompts(w, tasks, quick_config());
        std::vector<Tensor> theta0;
        for (const Tensor& t : base.bank.theta0) theta0.push_back(t.clone());
        const LoraFactors f0 = LoraFactors::init(w.config, {"copy", "reverse"}, LoraOptions{}, 5);
        const TaloraResult r = train_talora(w, base.bank, f0, tasks, quick_config());
        adapt_target(w, base.bank.theta0, r.factors.slow, generate_task(builtin_task("sort-desc"), 3, 60), 8,
                     quick_config());
        CHECK(w.bit_equal(before));
        CHECK(all_bit_equal(base.bank.theta0, theta0));
    }

    TEST_CASE("same seed gives bitwise-identical factors") {
        const BackboneWeights w = tiny_backbone();
        const auto tasks = tiny_tasks();
        const BasePromptResult base = train_base_prompts(w, tasks, quick_config());
        const LoraFactors f0 = LoraFactors::init(w.config, {"copy", "reverse"}, LoraOptions{}, 5);
        const TaloraResult a = train_talora(w, base.bank, f0, tasks, quick_config());
        const TaloraResult b = train_talora(w, base.bank, f0, tasks, quick_config());
        CHECK(all_bit_equal(flat_fast(a.factors), flat_fast(b.factors)));
        CHECK(all_bit_equal(a.factors.slow, b.factors.slow));
    }

    TEST_CASE("mismatched inputs are rejected") {
        const BackboneWeights w = tiny_backbone();
        const auto tasks = tiny_tasks();
        const BasePromptResult base = train_base_prompts(w, tasks, quick_config());
        const LoraFactors three = LoraFactors::init(w.config, {"a", "b", "c"}, LoraOptions{}, 5);
        CHECK_THROWS_AS(train_talora(w, base.bank, three, tasks, quick_config()), DimensionError);
    }

    TEST_CASE("full loss gradients match central differences") {
        BackboneConfig bc = tiny_config();
        bc.n_layers = 2;
        bc.lora_layers = 2;
        BackboneWeights w = init_backbone(bc, 8);
        w.freeze();
        std::mt19937_64 rng(9);
        std::vector<Tensor> theta0;
        for (int l = 0; l < 2; ++l) theta0.push_back(test::randn({3, 16}, rng, 0.5));
        LoraFactors f = LoraFactors::init(bc, {"copy", "reverse"}, LoraOptions{}, 10);
        std::vector<Tensor> params = f.slow;
        const auto fast = flat_fast(f);
        params.insert(params.end(), fast.begin(), fast.end());
        for (Tensor& p : params) {
            for (double& x : p.mutable_data()) x *= 20.0;
            p.set_requires_grad(true);
        }
        for (Tensor& g : f.gates) g.mutable_data()[0] = 0.3;
        const auto tasks = tiny_tasks(10);
        std::vector<std::vector<std::vector<int>>> tokens(2);
        std::vector<std::vector<int>> labels(2);
        for (std::size_t i = 0; i < 2; ++i) {
            for (std::size_t s = 0; s < 3; ++s) {
                const EncodedSample e = encode_sample(tasks[i].train[s], prompted_lead_token(bc));
                tokens[i].push_back(e.tokens);
                labels[i].insert(labels[i].end(), e.labels.begin(), e.labels.end());
            }
        }
        auto loss = [&] {
            Tensor total = num::scale(orthogonality_penalty(f), 1e-3);
            for (std::size_t i = 0; i < 2; ++i) {
                const PromptSet prompts = assemble_prompts(theta0, f, i);
                total = num::add(total, num::cross_entropy_from_logits(forward_ragged(w, tokens[i], &prompts).rows,
                                                                        labels[i]));
            }
            return total;
        };
        const num::GradCheckReport report = num::finite_diff_check(loss, params);
        CHECK(report.max_relative_error < 1e-4);
    }
}

TEST_SUITE("phase 3") {
    TEST_CASE("k must be positive and available") {
        const BackboneWeights w = tiny_backbone();
        const auto tasks = tiny_tasks();
        const BasePromptResult base = train_base_prompts(w, tasks, quick_config());
        const LoraFactors f0 = LoraFactors::init(w.config, {"copy", "reverse"}, LoraOptions{}, 5);
        const TaskDataset target = generate_task(builtin_task("sort-desc"), 3, 20);
        CHECK_THROWS_AS(adapt_target(w, base.bank.theta0, f0.slow, target, 0, quick_config()), ArgumentError);
        CHECK_THROWS_AS(adapt_target(w, base.bank.theta0, f0.slow, target, 19, quick_config()), ArgumentError);
    }

    TEST_CASE("baseline is the untrained initialization") {
        const BackboneWeights w = tiny_backbone();
        const auto tasks = tiny_tasks();
        const BasePromptResult base = train_base_prompts(w, tasks, quick_config());
        const LoraFactors f0 = LoraFactors::init(w.config, {"copy", "reverse"}, LoraOptions{}, 5);
        const TaskDataset target = generate_task(builtin_task("sort-desc"), 3, 60);
        const TrainConfig c = quick_config();
        const AdaptResult r = adapt_target(w, base.bank.theta0, f0.slow, target, 8, c);
        CHECK(r.loss_trace.size() == 10);
        const Metrics plain = evaluate(w, nullptr, target.unseen);
        CHECK(r.baseline.exact_match == plain.exact_match);
        CHECK(r.baseline.loss == doctest::Approx(plain.loss).epsilon(1e-12));
        const AdaptResult again = adapt_target(w, base.bank.theta0, f0.slow, target, 8, c);
        CHECK(again.metrics.loss == r.metrics.loss);
    }
}

TEST_SUITE("metrics") {
    TEST_CASE("oracle logits give exact match 1") {
        const std::vector<int> labels = {-1, 3, 5, -1, 2};
        const std::vector<std::size_t> offsets = {0, 3, 5};
        Tensor logits = Tensor::zeros({5, 8});
        for (std::size_t r = 0; r < 5; ++r) {
            if (labels[r] >= 0) logits.mutable_data()[r * 8 + std::size_t(labels[r])] = 10.0;
        }
        const Metrics m = metrics_from_logits(logits, labels, offsets);
        CHECK(m.exact_match == 1.0);
        CHECK(m.token_accuracy == 1.0);
        CHECK(m.samples == 2);
    }

    TEST_CASE("one wrong token fails the whole sample") {
        const std::vector<int> labels = {1, 2, 3};
        const std::vector<std::size_t> offsets = {0, 2, 3};
        Tensor logits = Tensor::zeros({3, 4});
        logits.mutable_data()[0 * 4 + 1] = 1.0;
        logits.mutable_data()[1 * 4 + 0] = 1.0;
        logits.mutable_data()[2 * 4 + 3] = 1.0;
        const Metrics m = metrics_from_logits(logits, labels, offsets);
        CHECK(m.exact_match == 0.5);
        CHECK(m.token_accuracy == doctest::Approx(2.0 / 3.0));
    }

    TEST_CASE("uniform random logits sit at chance") {
        std::mt19937_64 rng(12);
        std::uniform_int_distribution<int> label(0, 31);
        const std::size_t n = 4000;
        const Tensor logits = test::randn({n, 32}, rng);
        std::vector<int> labels(n);
        std::vector<std::size_t> offsets(n + 1);
        for (std::size_t i = 0; i < n; ++i) {
            labels[i] = label(rng);
            offsets[i + 1] = i + 1;
        }
        const Metrics m = metrics_from_logits(logits, labels, offsets);
        CHECK(std::abs(m.token_accuracy - 1.0 / 32.0) < 0.02);
        CHECK(m.exact_match == m.token_accuracy);
    }

    TEST_CASE("evaluation is deterministic") {
        const BackboneWeights w = tiny_backbone();
        const TaskDataset d = generate_task(builtin_task("copy"), 4, 100);
        const Metrics a = evaluate(w, nullptr, d.unseen), b = evaluate(w, nullptr, d.unseen);
        CHECK(a.loss == b.loss);
        CHECK(a.token_accuracy == b.token_accuracy);
        CHECK_THROWS_AS(evaluate(w, nullptr, std::span<const Sample>()), ArgumentError);
    }
}
