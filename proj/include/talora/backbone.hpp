// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "talora/numerics/tensor.hpp"
#include "talora/taskgen.hpp"

namespace talora {

struct BackboneConfig {
    int vocab_size = 32;
    int model_dim = 64;
    int n_heads = 4;
    int n_layers = 8;
    int max_seq_len = 64;
    int prompt_len = 20;
    /// Number of final layers that accept adaptable prompts.
    int lora_layers = 4;
    int ffn_mult = 4;
    /// Input format: sequences start with a lead token. During pre-training it
    /// names the task (or is the null marker); prompted runs always use the null marker.
    bool task_markers = true;

    void validate() const;
    int head_dim() const { return model_dim / n_heads; }
    int first_lora_layer() const { return n_layers - lora_layers; }
    bool is_lora_layer(int layer) const { return layer >= first_lora_layer() && layer < n_layers; }
};

/// Closed-form trainable-parameter count of the architecture.
std::size_t backbone_parameter_count(const BackboneConfig& config);

struct LayerWeights {
    num::Tensor ln1_gamma, ln1_beta;
    num::Tensor wq, wk, wv, wo;
    num::Tensor ln2_gamma, ln2_beta;
    num::Tensor w1, b1, w2, b2;
};

struct BackboneWeights {
    BackboneConfig config;
    num::Tensor token_embedding;
    num::Tensor position_embedding;
    std::vector<LayerWeights> layers;
    num::Tensor final_gamma, final_beta;
    num::Tensor head_weight, head_bias;

    /// Every tensor with a stable checkpoint name ("backbone.*").
    std::vector<std::pair<std::string, num::Tensor>> named_tensors() const;
    std::size_t parameter_count() const;
    /// Deep copy with fresh, unfrozen storage.
    BackboneWeights clone() const;
    void freeze();
    bool frozen() const;
    bool bit_equal(const BackboneWeights& other) const;
    /// Rebuilds weights from named tensors (see named_tensors).
    static BackboneWeights from_named(const BackboneConfig& config,
                                      std::span<const std::pair<std::string, num::Tensor>> tensors);
};

BackboneWeights init_backbone(const BackboneConfig& config, std::uint64_t seed);

/// Adaptable prompt P_a for one of the final lora layers, with its gate
/// (one scalar, or one value per head).
struct LayerPrompt {
    int layer = 0;
    num::Tensor prompt;
    num::Tensor gate;
};
using PromptSet = std::vector<LayerPrompt>;

/// Rows of a ragged batch stacked into one matrix; sequence b owns rows
/// [offsets[b], offsets[b+1]).
struct RaggedRows {
    num::Tensor rows;
    std::vector<std::size_t> offsets;
    std::size_t batch() const { return offsets.size() - 1; }
};

/// Logits for every position of every sequence, shape batch×len×V.
/// All sequences must share one length.
num::Tensor forward(const BackboneWeights& weights, std::span<const std::vector<int>> tokens,
                    const PromptSet* prompts = nullptr);

/// Logits for a ragged batch, stacked as (sum of lengths)×V.
RaggedRows forward_ragged(const BackboneWeights& weights, std::span<const std::vector<int>> tokens,
                          const PromptSet* prompts = nullptr);

/// Hidden states entering the first lora layer. They do not depend on any
/// prompt, so training loops compute them once per sample.
RaggedRows forward_trunk(const BackboneWeights& weights, std::span<const std::vector<int>> tokens);

/// Runs the lora layers and output head on hidden states from forward_trunk.
num::Tensor forward_from_trunk(const BackboneWeights& weights, const RaggedRows& trunk, const PromptSet* prompts);

struct PretrainOptions {
    int steps = 500;
    int batch_size = 16;
    double learning_rate = 1e-3;
    std::uint64_t seed = 42;
    /// Probability of replacing a task marker by the null marker.
    double null_marker_rate = 0.25;
};

struct PretrainResult {
    BackboneWeights weights;
    std::vector<double> loss_trace;
};

/// Next-token training of all backbone weights on a task mixture, loss taken
/// on target positions. The returned weights are frozen.
PretrainResult pretrain_backbone(const BackboneWeights& initial, std::span<const TaskDataset> mixture,
                                 const PretrainOptions& options);

/// Lead token placed before inputs outside pre-training.
std::optional<int> prompted_lead_token(const BackboneConfig& config);

}  // namespace talora
