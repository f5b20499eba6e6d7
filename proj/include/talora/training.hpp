// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "talora/backbone.hpp"
#include "talora/numerics/optim.hpp"
#include "talora/numerics/tensor.hpp"
#include "talora/talora.hpp"
#include "talora/taskgen.hpp"

namespace talora {

struct TrainConfig {
    double lr_prompt = 5e-3;
    double lr_slow = 1e-4;
    double lr_fast = 1e-3;
    double lambda = 1e-3;
    int phase1_steps = 1000;
    int phase2_steps = 2000;
    int phase3_steps = 300;
    int batch_size = 16;
    std::uint64_t seed = 42;
    num::AdamHyper adam;
    int shots = 32;
    /// Std of the Gaussian phase-1 prompt initialization.
    double prompt_init_std = 0.02;
    LoraOptions lora;
    int snapshot_every = 100;

    /// Learning rates may be 0 (a frozen group) but never negative.
    void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const BackboneConfig& config);
BackboneConfig backbone_config_from_json(const nlohmann::json& j);

/// Prompt-independent hidden states of every sample, computed once.
class TrunkCache {
public:
    TrunkCache(const BackboneWeights& weights, std::span<const Sample> samples, std::optional<int> lead);

    std::size_t size() const { return rows_.size(); }
    /// Stacked trunk rows and labels of the selected samples.
    RaggedRows batch(std::span<const std::size_t> indices, std::vector<int>& labels) const;

private:
    std::vector<num::Tensor> rows_;
    std::vector<std::vector<int>> labels_;
};

struct BankSnapshot {
    int step = 0;
    /// theta[task][lora layer]
    std::vector<std::vector<num::Tensor>> theta;
};

struct BasePromptResult {
    PromptBank bank;
    /// gates[task][lora layer] trained alongside each prompt.
    std::vector<std::vector<num::Tensor>> gates;
    /// loss_trace[task][step]
    std::vector<std::vector<double>> loss_trace;
    /// Taken every snapshot_every steps, plus step 0 and the final step.
    std::vector<BankSnapshot> snapshots;

    /// Vanilla-PT prompts of one task.
    PromptSet prompts(std::size_t task) const;
};

/// Phase 1: an independent vanilla prompt per source task.
BasePromptResult train_base_prompts(const BackboneWeights& backbone, std::span<const TaskDataset> tasks,
                                    const TrainConfig& config);

struct TraceRow {
    int step = 0;
    std::string task;
    double loss = 0.0;
    double penalty = 0.0;
    double mean_abs_tanh_gate = 0.0;
};

struct TaloraResult {
    LoraFactors factors;
    std::vector<TraceRow> trace;
};

/// Phase 2: joint training of B (lr_slow) and per-task u, v plus the shared
/// gates (lr_fast) on round-robin task batches, loss = CE + λ·penalty.
TaloraResult train_talora(const BackboneWeights& backbone, const PromptBank& bank, const LoraFactors& initial,
                          std::span<const TaskDataset> tasks, const TrainConfig& config);

struct Metrics {
    double exact_match = 0.0;
    double token_accuracy = 0.0;
    double loss = 0.0;
    std::size_t samples = 0;
};

/// Teacher-forced greedy metrics from stacked logits; labels of -1 are skipped
/// and `offsets` delimit the samples.
Metrics metrics_from_logits(const num::Tensor& logits, std::span<const int> labels,
                            std::span<const std::size_t> offsets);

/// Metrics of the backbone under `prompts` (nullptr for no prompts).
Metrics evaluate(const BackboneWeights& backbone, const PromptSet* prompts, std::span<const Sample> split);
/// Metrics of TA-LoRA task factors.
Metrics evaluate(const BackboneWeights& backbone, std::span<const num::Tensor> theta0, std::span<const num::Tensor> slow,
                 const TaskFactors& task, double scale, std::span<const Sample> split);

struct AdaptResult {
    TaskFactors factors;
    std::vector<double> loss_trace;
    /// Held-out metrics after adaptation.
    Metrics metrics;
    /// Held-out metrics of the untrained initialization.
    Metrics baseline;
};

/// Phase 3: fresh u, v and gate for a target task, trained on exactly k
/// samples of its train split with θ0 and B frozen.
AdaptResult adapt_target(const BackboneWeights& backbone, std::span<const num::Tensor> theta0,
                         std::span<const num::Tensor> slow, const TaskDataset& target, int k,
                         const TrainConfig& config);

/// Mean |tanh(g)| over all gate entries.
double mean_abs_tanh(std::span<const num::Tensor> gates);

void write_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> rows);

// Checkpoints: "TALR", u32 version, u64-length JSON config, u32 tensor count,
// then per tensor u32 name length, name, u8 dtype, u8 rank, u64 dims, payload.

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

struct NamedTensor {
    std::string name;
    num::Tensor tensor;
};

struct Checkpoint {
    nlohmann::json config = nlohmann::json::object();
    std::vector<NamedTensor> tensors;

    /// nullptr when absent.
    const num::Tensor* find(const std::string& name) const;
    /// Throws FormatError when absent.
    const num::Tensor& at(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint, DType dtype = DType::F32);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint, DType dtype = DType::F32);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Rounds every value through float, as a 32-bit payload would.
num::Tensor round_to_f32(const num::Tensor& t);

// Stable tensor names of the pipeline artifacts.
void add_backbone(Checkpoint& ckpt, const BackboneWeights& weights);
BackboneWeights backbone_from(const Checkpoint& ckpt);
void add_base_prompts(Checkpoint& ckpt, const BasePromptResult& base);
BasePromptResult base_prompts_from(const Checkpoint& ckpt);
void add_factors(Checkpoint& ckpt, const PromptBank& bank, const LoraFactors& factors);
/// θ0 and factors stored by add_factors.
std::pair<std::vector<num::Tensor>, LoraFactors> factors_from(const Checkpoint& ckpt);
void add_task_factors(Checkpoint& ckpt, const TaskFactors& task);
TaskFactors task_factors_from(const Checkpoint& ckpt);

}  // namespace talora
