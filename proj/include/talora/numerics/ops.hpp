// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "talora/numerics/tensor.hpp"

// Differentiable tensor operations. Every op records its reverse rule on
// the active GradientTape when at least one input requires grad.
namespace talora::num {

// Matrices are rank-2; rank-1 vectors are accepted wherever a 1×n row is.

/// a[m×k] · b[k×n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// a[m×k] · b[n×k]ᵀ
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// a·bᵀ / √k, the scaled dot-product logits of two row sets.
Tensor scaled_dot(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// a multiplied by the single value held in s.
Tensor mul_scalar(const Tensor& a, const Tensor& s);
/// Adds block (n×H) to every consecutive n-row group of batch (k·n × H).
/// With a 1×H block this is a per-row bias add.
Tensor add_broadcast(const Tensor& batch, const Tensor& block);

Tensor tanh(const Tensor& a);
/// Tanh-approximated GELU.
Tensor gelu(const Tensor& a);
/// Row-wise normalization with affine gamma/beta of length cols.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Causal masking inside one segment: row r may see the first r + query_offset + 1
/// columns of that segment.
struct CausalMask {
    std::size_t segment = 0;
    std::size_t query_offset = 0;
};

/// Softmax over each contiguous column segment of each row independently.
/// `boundaries` are the interior split points, strictly increasing in (0, cols).
Tensor softmax_segments(const Tensor& logits, std::span<const std::size_t> boundaries,
                        std::optional<CausalMask> causal = std::nullopt);

/// Mean cross-entropy over rows whose target is >= 0; rows with target -1 are skipped.
Tensor cross_entropy_from_logits(const Tensor& logits, std::span<const int> targets);

/// u ⊗ v as a (numel u)×(numel v) matrix.
Tensor outer(const Tensor& u, const Tensor& v);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& a);
Tensor sum_squares(const Tensor& a);

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
/// Rows of table selected by ids (embedding lookup).
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
Tensor reshape(const Tensor& a, Shape shape);
/// The i-th flat element as a scalar tensor.
Tensor element(const Tensor& a, std::size_t i);

}  // namespace talora::num
