// SPDX-License-Identifier: Apache-2.0
#include "talora/attention.hpp"

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <memory>

#include "talora/errors.hpp"
#include "talora/numerics/ops.hpp"
#include "talora/numerics/tape.hpp"

namespace talora {

using num::Tensor;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Stride = Eigen::OuterStride<>;
using Block = Eigen::Map<const RowMat, 0, Stride>;
using MutBlock = Eigen::Map<RowMat, 0, Stride>;

Block block(std::span<const double> d, std::size_t row, std::size_t col, std::size_t rows, std::size_t cols,
            std::size_t stride) {
    return Block(d.data() + row * stride + col, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                 Stride(static_cast<Eigen::Index>(stride)));
}

MutBlock block(std::vector<double>& d, std::size_t row, std::size_t col, std::size_t rows, std::size_t cols,
               std::size_t stride) {
    return MutBlock(d.data() + row * stride + col, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                    Stride(static_cast<Eigen::Index>(stride)));
}

/// Row-wise softmax; with `causal`, row i only covers columns [0, i].
void softmax_rows(RowMat& s, bool causal) {
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const Eigen::Index width = causal ? i + 1 : s.cols();
        double m = s(i, 0);
        for (Eigen::Index j = 1; j < width; ++j) m = std::max(m, s(i, j));
        double z = 0.0;
        for (Eigen::Index j = 0; j < width; ++j) {
            s(i, j) = std::exp(s(i, j) - m);
            z += s(i, j);
        }
        for (Eigen::Index j = 0; j < width; ++j) s(i, j) /= z;
        for (Eigen::Index j = width; j < s.cols(); ++j) s(i, j) = 0.0;
    }
}

/// d(logits) from d(scores) through a row softmax, in place.
void softmax_backward(const RowMat& s, RowMat& ds) {
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const double dot = s.row(i).dot(ds.row(i));
        for (Eigen::Index j = 0; j < s.cols(); ++j) ds(i, j) = s(i, j) * (ds(i, j) - dot);
    }
}

}  // namespace

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (k.rows() != q.rows() || v.rows() != q.rows()) {
        throw DimensionError("causal_attention: q " + num::shape_to_string(q.shape()) + ", k " +
                             num::shape_to_string(k.shape()) + ", v " + num::shape_to_string(v.shape()));
    }
    const Tensor scores = num::softmax_segments(num::scaled_dot(q, k), {}, num::CausalMask{0, 0});
    return num::matmul(scores, v);
}

Tensor zero_init_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t prefix_len,
                           const Tensor& gate) {
    if (gate.numel() != 1) {
        throw DimensionError("zero_init_attention: gate must be a scalar, got " + num::shape_to_string(gate.shape()));
    }
    if (prefix_len == 0) {
        if (gate.item() != 0.0) throw ArgumentError("zero_init_attention: nonzero gate without a prompt prefix");
        return causal_attention(q, k, v);
    }
    const std::size_t m = q.rows();
    if (k.rows() != prefix_len + m || v.rows() != prefix_len + m) {
        throw DimensionError("zero_init_attention: expected " + std::to_string(prefix_len + m) +
                             " key/value rows for prefix " + std::to_string(prefix_len) + " and " +
                             std::to_string(m) + " queries, got k " + num::shape_to_string(k.shape()) + ", v " +
                             num::shape_to_string(v.shape()));
    }
    const std::array<std::size_t, 1> split{prefix_len};
    const Tensor scores = num::softmax_segments(num::scaled_dot(q, k), split, num::CausalMask{1, 0});
    const Tensor prompt_scores = num::mul_scalar(num::slice_cols(scores, 0, prefix_len), num::tanh(gate));
    const Tensor token_scores = num::slice_cols(scores, prefix_len, prefix_len + m);
    return num::add(num::matmul(prompt_scores, num::slice_rows(v, 0, prefix_len)),
                    num::matmul(token_scores, num::slice_rows(v, prefix_len, prefix_len + m)));
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::size_t> offsets,
                            std::size_t n_heads, const PromptPrefix* prefix) {
    const std::size_t R = q.rows(), H = q.cols();
    if (q.rank() != 2 || k.shape() != q.shape() || v.shape() != q.shape()) {
        throw DimensionError("multi_head_attention: q " + num::shape_to_string(q.shape()) + ", k " +
                             num::shape_to_string(k.shape()) + ", v " + num::shape_to_string(v.shape()));
    }
    if (n_heads == 0 || H % n_heads != 0) throw DimensionError("multi_head_attention: heads must divide the width");
    if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != R) {
        throw DimensionError("multi_head_attention: offsets do not cover the rows");
    }
    for (std::size_t b = 0; b + 1 < offsets.size(); ++b) {
        if (offsets[b + 1] <= offsets[b]) throw DimensionError("multi_head_attention: empty sequence in batch");
    }
    const bool prompted = prefix != nullptr;
    std::size_t n = 0;
    if (prompted) {
        if (!prefix->keys || !prefix->values || !prefix->gate) {
            throw ArgumentError("multi_head_attention: prefix needs keys, values and gate");
        }
        n = prefix->keys->rows();
        if (prefix->keys->cols() != H || prefix->values->shape() != prefix->keys->shape()) {
            throw DimensionError("multi_head_attention: prompt keys " + num::shape_to_string(prefix->keys->shape()) +
                                 " and values " + num::shape_to_string(prefix->values->shape()) +
                                 " do not match width " + std::to_string(H));
        }
        if (prefix->gate->numel() != 1 && prefix->gate->numel() != n_heads) {
            throw DimensionError("multi_head_attention: gate needs 1 or " + std::to_string(n_heads) + " values");
        }
    }
    const std::size_t d = H / n_heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(d));
    const std::size_t batch = offsets.size() - 1;
    std::vector<double> tanh_gate(n_heads, 0.0);
    if (prompted) {
        const auto g = prefix->gate->data();
        for (std::size_t h = 0; h < n_heads; ++h) tanh_gate[h] = std::tanh(g.size() == 1 ? g[0] : g[h]);
    }

    const Tensor pk = prompted ? *prefix->keys : Tensor();
    const Tensor pv = prompted ? *prefix->values : Tensor();
    const Tensor gate = prompted ? *prefix->gate : Tensor();
    bool needs_grad = num::GradientTape::active() != nullptr &&
                      (q.requires_grad() || k.requires_grad() || v.requires_grad() ||
                       (prompted && (pk.requires_grad() || pv.requires_grad() || gate.requires_grad())));

    // Softmax scores per (sequence, head), kept for the reverse rule.
    auto token_scores = std::make_shared<std::vector<RowMat>>(batch * n_heads);
    auto prompt_scores = std::make_shared<std::vector<RowMat>>(prompted ? batch * n_heads : 0);
    std::vector<double> out(R * H, 0.0);
    RowMat tmp;
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t r0 = offsets[b], T = offsets[b + 1] - r0;
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t c0 = h * d;
            const auto Q = block(q.data(), r0, c0, T, d, H);
            RowMat& S = (*token_scores)[b * n_heads + h];
            S.noalias() = Q * block(k.data(), r0, c0, T, d, H).transpose();
            S *= inv;
            softmax_rows(S, true);
            auto O = block(out, r0, c0, T, d, H);
            O.noalias() = S * block(v.data(), r0, c0, T, d, H);
            if (!prompted) continue;
            RowMat& P = (*prompt_scores)[b * n_heads + h];
            P.noalias() = Q * block(pk.data(), 0, c0, n, d, H).transpose();
            P *= inv;
            softmax_rows(P, false);
            tmp.noalias() = P * block(pv.data(), 0, c0, n, d, H);
            const double t = tanh_gate[h];
            for (Eigen::Index i = 0; i < O.rows(); ++i) {
                for (Eigen::Index j = 0; j < O.cols(); ++j) O(i, j) += t * tmp(i, j);
            }
        }
    }
    Tensor result({R, H}, std::move(out));
    result.mark_result(needs_grad);
    if (!needs_grad) return result;

    std::vector<std::size_t> offs(offsets.begin(), offsets.end());
    num::GradientTape::active()->record([q, k, v, pk, pv, gate, result, token_scores, prompt_scores, offs, tanh_gate,
                                         n_heads, n, d, H, inv, prompted]() mutable {
        if (!result.has_grad()) return;
        const std::vector<double>& g = result.raw_grad();
        const std::size_t batch = offs.size() - 1;
        RowMat dS, A;
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t r0 = offs[b], T = offs[b + 1] - r0;
            for (std::size_t h = 0; h < n_heads; ++h) {
                const std::size_t c0 = h * d;
                const auto G = block(std::span<const double>(g), r0, c0, T, d, H);
                const auto Q = block(q.data(), r0, c0, T, d, H);
                const RowMat& S = (*token_scores)[b * n_heads + h];
                if (v.requires_grad()) block(v.raw_grad(), r0, c0, T, d, H).noalias() += S.transpose() * G;
                if (q.requires_grad() || k.requires_grad()) {
                    dS.noalias() = G * block(v.data(), r0, c0, T, d, H).transpose();
                    softmax_backward(S, dS);
                    dS *= inv;
                    if (q.requires_grad()) {
                        block(q.raw_grad(), r0, c0, T, d, H).noalias() += dS * block(k.data(), r0, c0, T, d, H);
                    }
                    if (k.requires_grad()) block(k.raw_grad(), r0, c0, T, d, H).noalias() += dS.transpose() * Q;
                }
                if (!prompted) continue;
                const RowMat& P = (*prompt_scores)[b * n_heads + h];
                const auto Vp = block(pv.data(), 0, c0, n, d, H);
                const double t = tanh_gate[h];
                if (gate.requires_grad()) {
                    A.noalias() = P * Vp;
                    const double dt = (G.array() * A.array()).sum();
                    gate.raw_grad()[gate.numel() == 1 ? 0 : h] += dt * (1.0 - t * t);
                }
                if (pv.requires_grad()) block(pv.raw_grad(), 0, c0, n, d, H).noalias() += t * (P.transpose() * G);
                if (q.requires_grad() || pk.requires_grad()) {
                    dS.noalias() = t * (G * Vp.transpose());
                    softmax_backward(P, dS);
                    dS *= inv;
                    if (q.requires_grad()) {
                        block(q.raw_grad(), r0, c0, T, d, H).noalias() += dS * block(pk.data(), 0, c0, n, d, H);
                    }
                    if (pk.requires_grad()) block(pk.raw_grad(), 0, c0, n, d, H).noalias() += dS.transpose() * Q;
                }
            }
        }
    });
    return result;
}

}  // namespace talora
