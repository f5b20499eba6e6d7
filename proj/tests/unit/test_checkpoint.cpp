// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstring>
#include <fstream>
#include <random>

#include "helpers.hpp"
#include "talora/errors.hpp"
#include "talora/training.hpp"

using namespace talora;
using num::Tensor;

namespace {

Checkpoint sample_checkpoint() {
    std::mt19937_64 rng(50);
    Checkpoint ck;
    ck.config = {{"name", "sample"}, {"lr", 1e-3}};
    ck.tensors.push_back({"a", test::randn({3, 4}, rng)});
    ck.tensors.push_back({"b.vec", test::randn({7}, rng)});
    ck.tensors.push_back({"c", test::randn({2, 3, 2}, rng)});
    return ck;
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
    std::ofstream os(p, std::ios::binary);
    os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

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

}  // namespace

TEST_SUITE("checkpoint") {
    TEST_CASE("64-bit round trip is bitwise") {
        test::TempDir dir("ckpt-f64");
        const Checkpoint ck = sample_checkpoint();
        save_checkpoint(dir.path() / "x.talr", ck, DType::F64);
        const Checkpoint back = load_checkpoint(dir.path() / "x.talr");
        CHECK(back.config == ck.config);
        REQUIRE(back.tensors.size() == 3);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(back.tensors[i].name == ck.tensors[i].name);
            CHECK(back.tensors[i].tensor.bit_equal(ck.tensors[i].tensor));
        }
    }

    TEST_CASE("32-bit payload widens to the rounded values") {
        const Checkpoint ck = sample_checkpoint();
        const Checkpoint back = decode_checkpoint(encode_checkpoint(ck));
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(back.tensors[i].tensor.bit_equal(round_to_f32(ck.tensors[i].tensor)));
            CHECK(num::max_abs_diff(back.tensors[i].tensor, ck.tensors[i].tensor) < 1e-6);
        }
        const Checkpoint again = decode_checkpoint(encode_checkpoint(back));
        for (std::size_t i = 0; i < 3; ++i) CHECK(again.tensors[i].tensor.bit_equal(back.tensors[i].tensor));
    }

    TEST_CASE("encoding is deterministic") {
        CHECK(encode_checkpoint(sample_checkpoint()) == encode_checkpoint(sample_checkpoint()));
    }

    TEST_CASE("layout of the header") {
        Checkpoint ck;
        ck.config = nlohmann::json::object();
        ck.tensors.push_back({"x", Tensor::vector({1.0})});
        const auto bytes = encode_checkpoint(ck, DType::F64);
        // magic 4, version 4, config length 8, "{}" 2, count 4, name length 4, "x" 1, dtype 1, rank 1, dim 8, payload 8
        CHECK(bytes.size() == 45);
        CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "TALR");
        CHECK(bytes[4] == 1);
        CHECK(bytes[16] == '{');
        CHECK(bytes[27] == 1);
        CHECK(bytes[28] == 1);
        CHECK(bytes[29] == 1);
    }

    TEST_CASE("corrupt magic") {
        auto bytes = encode_checkpoint(sample_checkpoint());
        bytes[0] = 'X';
        try {
            decode_checkpoint(bytes);
            FAIL("expected a format error");
        } catch (const FormatError& e) {
            CHECK(e.offset() == 0);
        }
    }

    TEST_CASE("unsupported version") {
        auto bytes = encode_checkpoint(sample_checkpoint());
        const std::uint32_t v999 = 999;
        std::memcpy(bytes.data() + 4, &v999, 4);
        test::TempDir dir("ckpt-v999");
        write_bytes(dir.path() / "v999.talr", bytes);
        try {
            load_checkpoint(dir.path() / "v999.talr");
            FAIL("expected a version error");
        } catch (const UnsupportedVersionError& e) {
            CHECK(e.version() == 999);
        }
    }

    TEST_CASE("truncation reports the offset") {
        const auto full = encode_checkpoint(sample_checkpoint());
        for (std::size_t cut : {std::size_t(2), std::size_t(10), full.size() / 2, full.size() - 1}) {
            const std::vector<std::uint8_t> part(full.begin(), full.begin() + long(cut));
            try {
                decode_checkpoint(part);
                FAIL("expected a format error");
            } catch (const FormatError& e) {
                CHECK(e.offset() <= cut);
                CHECK(std::string(e.what()).find("offset") != std::string::npos);
            }
        }
    }

    TEST_CASE("trailing bytes and bad dtype") {
        auto bytes = encode_checkpoint(sample_checkpoint());
        auto longer = bytes;
        longer.push_back(0);
        CHECK_THROWS_AS(decode_checkpoint(longer), FormatError);
        Checkpoint one;
        one.tensors.push_back({"x", Tensor::vector({1.0})});
        auto single = encode_checkpoint(one);
        single[27] = 7;
        try {
            decode_checkpoint(single);
            FAIL("expected a format error");
        } catch (const FormatError& e) {
            CHECK(e.offset() == 27);
        }
    }

    TEST_CASE("missing file") {
        test::TempDir dir("ckpt-missing");
        CHECK_THROWS_AS(load_checkpoint(dir.path() / "nope.talr"), MissingFileError);
    }

    TEST_CASE("backbone artifact round trip") {
        const BackboneWeights w = init_backbone(tiny_config(), 4);
        Checkpoint ck;
        add_backbone(ck, w);
        const BackboneWeights back = backbone_from(decode_checkpoint(encode_checkpoint(ck, DType::F64)));
        CHECK(back.bit_equal(w));
        CHECK(back.frozen());
    }

    TEST_CASE("prompt and factor artifacts round trip") {
        BackboneWeights w = init_backbone(tiny_config(), 4);
        w.freeze();
        const std::vector<TaskDataset> tasks = {generate_task(builtin_task("copy"), 1, 30),
                                                generate_task(builtin_task("reverse"), 2, 30)};
        TrainConfig c;
        c.phase1_steps = 3;
        c.phase2_steps = 3;
        c.batch_size = 2;
        const BasePromptResult base = train_base_prompts(w, tasks, c);
        const TaloraResult tr =
            train_talora(w, base.bank, LoraFactors::init(w.config, {"copy", "reverse"}, c.lora, 1), tasks, c);
        Checkpoint ck;
        add_base_prompts(ck, base);
        add_factors(ck, base.bank, tr.factors);
        const Checkpoint back = decode_checkpoint(encode_checkpoint(ck, DType::F64));
        const BasePromptResult b2 = base_prompts_from(back);
        CHECK(b2.bank.tasks == base.bank.tasks);
        for (std::size_t i = 0; i < 2; ++i) {
            for (std::size_t l = 0; l < 2; ++l) {
                CHECK(b2.bank.theta[i][l].bit_equal(base.bank.theta[i][l]));
                CHECK(b2.gates[i][l].bit_equal(base.gates[i][l]));
            }
        }
        const auto [theta0, f] = factors_from(back);
        for (std::size_t l = 0; l < 2; ++l) {
            CHECK(theta0[l].bit_equal(base.bank.theta0[l]));
            CHECK(f.slow[l].bit_equal(tr.factors.slow[l]));
            CHECK(f.gates[l].bit_equal(tr.factors.gates[l]));
            CHECK(f.u[1][l].bit_equal(tr.factors.u[1][l]));
            CHECK(f.v[0][l].bit_equal(tr.factors.v[0][l]));
        }
        CHECK(f.tasks == tr.factors.tasks);
        CHECK(f.first_layer == tr.factors.first_layer);
        CHECK(f.scale == tr.factors.scale);
        CHECK(back.find("theta0.l1") != nullptr);
        CHECK(back.find("u.t1.l2") != nullptr);
    }

    TEST_CASE("task factor artifacts round trip") {
        const TaskFactors t = TaskFactors::init(tiny_config(), LoraOptions{}, 3);
        Checkpoint ck;
        add_task_factors(ck, t);
        const TaskFactors back = task_factors_from(decode_checkpoint(encode_checkpoint(ck, DType::F64)));
        REQUIRE(back.u.size() == t.u.size());
        for (std::size_t l = 0; l < t.u.size(); ++l) {
            CHECK(back.u[l].bit_equal(t.u[l]));
            CHECK(back.v[l].bit_equal(t.v[l]));
            CHECK(back.gates[l].bit_equal(t.gates[l]));
        }
    }
}
