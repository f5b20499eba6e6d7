// SPDX-License-Identifier: Apache-2.0
#include "talora/pipeline.hpp"

#include <cstdio>

#include "talora/errors.hpp"

namespace talora {

namespace {

std::uint64_t task_seed(std::uint64_t base, const std::string& name) {
    std::uint64_t h = 1469598103934665603ULL ^ base;
    for (unsigned char c : name) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::vector<TaskDataset> generate_all(const std::vector<std::string>& names, const SuiteConfig& suite,
                                      int vocab_size) {
    std::vector<TaskDataset> out;
    for (const std::string& name : names) {
        out.push_back(
            generate_task(builtin_task(name, vocab_size), task_seed(suite.data_seed, name), suite.samples_per_task));
    }
    return out;
}

}  // namespace

void RunConfig::apply_seed(std::uint64_t s) {
    seed = s;
    pretrain.seed = s;
    train.seed = s;
}

void RunConfig::validate() const {
    backbone.validate();
    train.validate();
    if (pretrain.steps < 0 || pretrain.batch_size < 1 || !(pretrain.learning_rate >= 0.0)) {
        throw ArgumentError("pretrain: invalid schedule");
    }
    if (suite.source.size() < 2) throw ArgumentError("suite: needs at least two source tasks");
    if (suite.samples_per_task < 2) throw ArgumentError("suite: samples_per_task must be at least 2");
    for (const auto& n : suite.source) builtin_task(n, backbone.vocab_size);
    for (const auto& n : suite.target) builtin_task(n, backbone.vocab_size);
}

nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    j["backbone"] = to_json(c.backbone);
    j["pretrain"] = {{"steps", c.pretrain.steps},
                     {"batch_size", c.pretrain.batch_size},
                     {"learning_rate", c.pretrain.learning_rate},
                     {"null_marker_rate", c.pretrain.null_marker_rate}};
    nlohmann::json train = to_json(c.train);
    train.erase("seed");
    j["train"] = train;
    j["suite"] = {{"source", c.suite.source},
                  {"target", c.suite.target},
                  {"samples_per_task", c.suite.samples_per_task},
                  {"data_seed", c.suite.data_seed},
                  {"pretrain_on_targets", c.suite.pretrain_on_targets}};
    return j;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    if (j.contains("backbone")) c.backbone = backbone_config_from_json(j.at("backbone"));
    if (j.contains("pretrain")) {
        const auto& p = j.at("pretrain");
        c.pretrain.steps = p.value("steps", c.pretrain.steps);
        c.pretrain.batch_size = p.value("batch_size", c.pretrain.batch_size);
        c.pretrain.learning_rate = p.value("learning_rate", c.pretrain.learning_rate);
        c.pretrain.null_marker_rate = p.value("null_marker_rate", c.pretrain.null_marker_rate);
    }
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("suite")) {
        const auto& s = j.at("suite");
        c.suite.source = s.value("source", c.suite.source);
        c.suite.target = s.value("target", c.suite.target);
        c.suite.samples_per_task = s.value("samples_per_task", c.suite.samples_per_task);
        c.suite.data_seed = s.value("data_seed", c.suite.data_seed);
        c.suite.pretrain_on_targets = s.value("pretrain_on_targets", c.suite.pretrain_on_targets);
    }
    c.apply_seed(j.value("seed", c.seed));
    c.validate();
    return c;
}

RunConfig default_run_config() {
    RunConfig c;
    c.apply_seed(42);
    return c;
}

std::vector<TaskDataset> source_datasets(const SuiteConfig& suite, int vocab_size) {
    return generate_all(suite.source, suite, vocab_size);
}

std::vector<TaskDataset> target_datasets(const SuiteConfig& suite, int vocab_size) {
    return generate_all(suite.target, suite, vocab_size);
}

std::vector<TaskDataset> pretrain_mixture(const SuiteConfig& suite, int vocab_size) {
    std::vector<TaskDataset> mix = source_datasets(suite, vocab_size);
    if (suite.pretrain_on_targets) {
        std::vector<TaskDataset> targets = target_datasets(suite, vocab_size);
        mix.insert(mix.end(), targets.begin(), targets.end());
    }
    return mix;
}

std::vector<std::string> task_names(std::span<const TaskDataset> datasets) {
    std::vector<std::string> names;
    for (const TaskDataset& d : datasets) names.push_back(d.task);
    return names;
}

std::string fnv1a_hex(const std::string& text) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace talora
