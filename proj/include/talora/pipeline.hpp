// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "talora/backbone.hpp"
#include "talora/taskgen.hpp"
#include "talora/training.hpp"

namespace talora {

struct SuiteConfig {
    std::vector<std::string> source = default_source_tasks();
    std::vector<std::string> target = default_target_tasks();
    std::size_t samples_per_task = 1000;
    std::uint64_t data_seed = 1234;
    /// Include the target tasks in the backbone's pre-training mixture.
    bool pretrain_on_targets = true;
};

/// Everything one pipeline run depends on.
struct RunConfig {
    std::uint64_t seed = 42;
    BackboneConfig backbone;
    PretrainOptions pretrain;
    TrainConfig train;
    SuiteConfig suite;

    /// Copies the run seed into the pre-training and training options.
    void apply_seed(std::uint64_t s);
    void validate() const;
};

nlohmann::json to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j);

/// Desk defaults for the acceptance runs and the example config.
RunConfig default_run_config();

std::vector<TaskDataset> source_datasets(const SuiteConfig& suite, int vocab_size = 32);
std::vector<TaskDataset> target_datasets(const SuiteConfig& suite, int vocab_size = 32);
/// Source tasks, then (optionally) target tasks; marker ids follow this order.
std::vector<TaskDataset> pretrain_mixture(const SuiteConfig& suite, int vocab_size = 32);

std::vector<std::string> task_names(std::span<const TaskDataset> datasets);

/// 64-bit FNV-1a of a string, as 16 hex digits.
std::string fnv1a_hex(const std::string& text);

}  // namespace talora
