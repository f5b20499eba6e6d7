// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>

#include "talora/numerics/tensor.hpp"

namespace talora {

/// Causal scaled dot-product attention of one head over one sequence.
/// q, k, v are m×d.
num::Tensor causal_attention(const num::Tensor& q, const num::Tensor& k, const num::Tensor& v);

/// Zero-initialized gated attention of one head over one sequence.
///
/// Rows [0, prefix_len) of k and v belong to the adaptable prompt, the
/// remaining m rows to the real tokens queried by q (m×d). Prompt and token
/// columns are softmax-normalized separately; the prompt scores are then
/// scaled by tanh(gate) and nothing is renormalized. Token columns are
/// causally masked, prompt columns are visible to every query.
num::Tensor zero_init_attention(const num::Tensor& q, const num::Tensor& k, const num::Tensor& v,
                                std::size_t prefix_len, const num::Tensor& gate);

/// Prompt keys, values and gate shared by every sequence of a batch.
struct PromptPrefix {
    const num::Tensor* keys = nullptr;
    const num::Tensor* values = nullptr;
    /// One value, or one per head.
    const num::Tensor* gate = nullptr;
};

/// Multi-head form of causal_attention / zero_init_attention over a ragged
/// batch in a single op. q, k, v are R×H with sequence b on rows
/// [offsets[b], offsets[b+1]); head h owns columns [h·d, (h+1)·d). Returns
/// the concatenated head outputs, R×H.
num::Tensor multi_head_attention(const num::Tensor& q, const num::Tensor& k, const num::Tensor& v,
                                 std::span<const std::size_t> offsets, std::size_t n_heads,
                                 const PromptPrefix* prefix = nullptr);

}  // namespace talora
