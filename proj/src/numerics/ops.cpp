// SPDX-License-Identifier: Apache-2.0
#include "talora/numerics/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "talora/errors.hpp"
#include "talora/numerics/tape.hpp"

namespace talora::num {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_mat(std::span<const double> d, std::size_t r, std::size_t c) {
    return ConstMap(d.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MutMap as_mat(std::vector<double>& d, std::size_t r, std::size_t c) {
    return MutMap(d.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() > 2) {
        throw DimensionError(std::string(op) + " expects a matrix, got " + shape_to_string(t.shape()));
    }
}

template <typename... Ts>
bool any_requires_grad(const Ts&... ts) {
    return (ts.requires_grad() || ...);
}

/// Builds the result tensor and reports whether a reverse rule must be recorded.
template <typename... Ts>
bool tracked(Tensor& out, const Ts&... inputs) {
    GradientTape* tape = GradientTape::active();
    const bool on = tape != nullptr && any_requires_grad(inputs...);
    out.mark_result(on);
    return on;
}

void record(std::function<void()> rule) { GradientTape::active()->record(std::move(rule)); }

/// Returns the upstream gradient buffer of `out`, or nullptr when nothing flowed into it.
const std::vector<double>* upstream(Tensor& out) {
    if (!out.has_grad()) return nullptr;
    return &out.raw_grad();
}

Shape matrix_shape(std::size_t r, std::size_t c) { return {r, c}; }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul inner extents disagree: " + shape_to_string(a.shape()) + " x " +
                             shape_to_string(b.shape()));
    }
    std::vector<double> out(m * n);
    as_mat(out, m, n).noalias() = as_mat(a.data(), m, k) * as_mat(b.data(), k, n);
    Tensor c(matrix_shape(m, n), std::move(out));
    if (tracked(c, a, b)) {
        record([a, b, c, m, k, n]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            const auto dc = as_mat(*g, m, n);
            if (a.requires_grad()) as_mat(a.raw_grad(), m, k).noalias() += dc * as_mat(b.data(), k, n).transpose();
            if (b.requires_grad()) as_mat(b.raw_grad(), k, n).noalias() += as_mat(a.data(), m, k).transpose() * dc;
        });
    }
    return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_nt");
    require_matrix(b, "matmul_nt");
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k) {
        throw DimensionError("matmul_nt inner extents disagree: " + shape_to_string(a.shape()) + " x " +
                             shape_to_string(b.shape()) + "^T");
    }
    std::vector<double> out(m * n);
    as_mat(out, m, n).noalias() = as_mat(a.data(), m, k) * as_mat(b.data(), n, k).transpose();
    Tensor c(matrix_shape(m, n), std::move(out));
    if (tracked(c, a, b)) {
        record([a, b, c, m, k, n]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            const auto dc = as_mat(*g, m, n);
            if (a.requires_grad()) as_mat(a.raw_grad(), m, k).noalias() += dc * as_mat(b.data(), n, k);
            if (b.requires_grad()) as_mat(b.raw_grad(), n, k).noalias() += dc.transpose() * as_mat(a.data(), m, k);
        });
    }
    return c;
}

Tensor scaled_dot(const Tensor& a, const Tensor& b) {
    return scale(matmul_nt(a, b), 1.0 / std::sqrt(static_cast<double>(a.cols())));
}

Tensor transpose(const Tensor& a) {
    require_matrix(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    as_mat(out, n, m) = as_mat(a.data(), m, n).transpose();
    Tensor c(matrix_shape(n, m), std::move(out));
    if (tracked(c, a)) {
        record([a, c, m, n]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            as_mat(a.raw_grad(), m, n) += as_mat(*g, n, m).transpose();
        });
    }
    return c;
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + " shape mismatch: " + shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    const auto x = a.data(), y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    Tensor c(a.shape(), std::move(out));
    if (tracked(c, a, b)) {
        record([a, b, c]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            for (const Tensor* t : {&a, &b}) {
                if (!t->requires_grad()) continue;
                auto& d = t->raw_grad();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += (*g)[i];
            }
        });
    }
    return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    const auto x = a.data(), y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    Tensor c(a.shape(), std::move(out));
    if (tracked(c, a, b)) {
        record([a, b, c]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            if (a.requires_grad()) {
                auto& d = a.raw_grad();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += (*g)[i];
            }
            if (b.requires_grad()) {
                auto& d = b.raw_grad();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] -= (*g)[i];
            }
        });
    }
    return c;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    const auto x = a.data(), y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    Tensor c(a.shape(), std::move(out));
    if (tracked(c, a, b)) {
        record([a, b, c]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            if (a.requires_grad()) {
                auto& d = a.raw_grad();
                const auto y = b.data();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += (*g)[i] * y[i];
            }
            if (b.requires_grad()) {
                auto& d = b.raw_grad();
                const auto x = a.data();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += (*g)[i] * x[i];
            }
        });
    }
    return c;
}

Tensor scale(const Tensor& a, double factor) {
    const auto x = a.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
    Tensor c(a.shape(), std::move(out));
    if (tracked(c, a)) {
        record([a, c, factor]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            auto& d = a.raw_grad();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += (*g)[i] * factor;
        });
    }
    return c;
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw DimensionError("mul_scalar expects a scalar, got " + shape_to_string(s.shape()));
    const double factor = s.item();
    const auto x = a.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
    Tensor c(a.shape(), std::move(out));
    if (tracked(c, a, s)) {
        record([a, s, c, factor]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            if (a.requires_grad()) {
                auto& d = a.raw_grad();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += (*g)[i] * factor;
            }
            if (s.requires_grad()) {
                const auto x = a.data();
                double acc = 0.0;
                for (std::size_t i = 0; i < x.size(); ++i) acc += (*g)[i] * x[i];
                s.raw_grad()[0] += acc;
            }
        });
    }
    return c;
}

Tensor add_broadcast(const Tensor& batch, const Tensor& block) {
    require_matrix(batch, "add_broadcast");
    require_matrix(block, "add_broadcast");
    const std::size_t rows = batch.rows(), cols = batch.cols();
    const std::size_t n = block.rows();
    if (block.cols() != cols || rows % n != 0) {
        throw DimensionError("add_broadcast cannot tile " + shape_to_string(block.shape()) + " over " +
                             shape_to_string(batch.shape()));
    }
    const auto x = batch.data(), y = block.data();
    std::vector<double> out(x.size());
    const std::size_t period = n * cols;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i % period];
    Tensor c(batch.shape(), std::move(out));
    if (tracked(c, batch, block)) {
        record([batch, block, c, period]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            if (batch.requires_grad()) {
                auto& d = batch.raw_grad();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += (*g)[i];
            }
            if (block.requires_grad()) {
                auto& d = block.raw_grad();
                for (std::size_t i = 0; i < g->size(); ++i) d[i % period] += (*g)[i];
            }
        });
    }
    return c;
}

Tensor tanh(const Tensor& a) {
    const auto x = a.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
    Tensor c(a.shape(), std::move(out));
    if (tracked(c, a)) {
        record([a, c]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            auto& d = a.raw_grad();
            const auto y = c.data();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += (*g)[i] * (1.0 - y[i] * y[i]);
        });
    }
    return c;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

/// tanh through one exp call, within a few ulp of std::tanh and much cheaper.
double tanh_via_exp(double u) {
    const double e = std::exp(-2.0 * std::abs(u));
    const double t = (1.0 - e) / (1.0 + e);
    return std::copysign(t, u);
}

}  // namespace

Tensor gelu(const Tensor& a) {
    const auto x = a.data();
    std::vector<double> out(x.size());
    auto th = std::make_shared<std::vector<double>>(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x[i];
        const double t = tanh_via_exp(kGeluC * (v + kGeluA * v * v * v));
        (*th)[i] = t;
        out[i] = 0.5 * v * (1.0 + t);
    }
    Tensor c(a.shape(), std::move(out));
    if (tracked(c, a)) {
        record([a, c, th]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            auto& d = a.raw_grad();
            const auto x = a.data();
            for (std::size_t i = 0; i < d.size(); ++i) {
                const double v = x[i];
                const double t = (*th)[i];
                const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
                d[i] += (*g)[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
            }
        });
    }
    return c;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_matrix(x, "layer_norm");
    const std::size_t rows = x.rows(), cols = x.cols();
    if (gamma.numel() != cols || beta.numel() != cols) {
        throw DimensionError("layer_norm affine parameters " + shape_to_string(gamma.shape()) + "/" +
                             shape_to_string(beta.shape()) + " do not match width " + std::to_string(cols));
    }
    const auto in = x.data(), gm = gamma.data(), bt = beta.data();
    std::vector<double> out(in.size());
    std::vector<double> xhat(in.size());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = in.data() + r * cols;
        double mean = 0.0;
        for (std::size_t j = 0; j < cols; ++j) mean += row[j];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t j = 0; j < cols; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(cols);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < cols; ++j) {
            const double h = (row[j] - mean) * is;
            xhat[r * cols + j] = h;
            out[r * cols + j] = h * gm[j] + bt[j];
        }
    }
    Tensor c(x.shape(), std::move(out));
    if (tracked(c, x, gamma, beta)) {
        record([x, gamma, beta, c, rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            const auto gm = gamma.data();
            if (gamma.requires_grad() || beta.requires_grad()) {
                auto* dg = gamma.requires_grad() ? &gamma.raw_grad() : nullptr;
                auto* db = beta.requires_grad() ? &beta.raw_grad() : nullptr;
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < cols; ++j) {
                        const double up = (*g)[r * cols + j];
                        if (dg) (*dg)[j] += up * xhat[r * cols + j];
                        if (db) (*db)[j] += up;
                    }
                }
            }
            if (x.requires_grad()) {
                auto& dx = x.raw_grad();
                const double inv_n = 1.0 / static_cast<double>(cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t j = 0; j < cols; ++j) {
                        const double dh = (*g)[r * cols + j] * gm[j];
                        mean_d += dh;
                        mean_dx += dh * xhat[r * cols + j];
                    }
                    mean_d *= inv_n;
                    mean_dx *= inv_n;
                    for (std::size_t j = 0; j < cols; ++j) {
                        const double dh = (*g)[r * cols + j] * gm[j];
                        dx[r * cols + j] += inv_std[r] * (dh - mean_d - xhat[r * cols + j] * mean_dx);
                    }
                }
            }
        });
    }
    return c;
}

Tensor softmax_segments(const Tensor& logits, std::span<const std::size_t> boundaries,
                        std::optional<CausalMask> causal) {
    require_matrix(logits, "softmax_segments");
    const std::size_t rows = logits.rows(), cols = logits.cols();
    std::vector<std::size_t> edges;
    edges.reserve(boundaries.size() + 2);
    edges.push_back(0);
    for (std::size_t b : boundaries) edges.push_back(b);
    edges.push_back(cols);
    for (std::size_t s = 0; s + 1 < edges.size(); ++s) {
        if (edges[s + 1] <= edges[s]) {
            throw ArgumentError("softmax_segments: empty segment " + std::to_string(s) + " at columns [" +
                                std::to_string(edges[s]) + ", " + std::to_string(edges[s + 1]) + ")");
        }
    }
    const std::size_t n_segments = edges.size() - 1;
    if (causal && causal->segment >= n_segments) {
        throw ArgumentError("softmax_segments: causal segment " + std::to_string(causal->segment) + " out of range");
    }

    const auto in = logits.data();
    std::vector<double> out(in.size(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t s = 0; s < n_segments; ++s) {
            const std::size_t lo = edges[s];
            std::size_t hi = edges[s + 1];
            if (causal && causal->segment == s) hi = std::min(hi, lo + r + causal->query_offset + 1);
            const double* x = in.data() + r * cols;
            double* y = out.data() + r * cols;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = lo; j < hi; ++j) mx = std::max(mx, x[j]);
            double total = 0.0;
            for (std::size_t j = lo; j < hi; ++j) {
                y[j] = std::exp(x[j] - mx);
                total += y[j];
            }
            for (std::size_t j = lo; j < hi; ++j) y[j] /= total;
        }
    }
    Tensor c(logits.shape(), std::move(out));
    if (tracked(c, logits)) {
        record([logits, c, rows, cols, edges = std::move(edges)]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            auto& dx = logits.raw_grad();
            const auto y = c.data();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t s = 0; s + 1 < edges.size(); ++s) {
                    double inner = 0.0;
                    for (std::size_t j = edges[s]; j < edges[s + 1]; ++j) inner += y[r * cols + j] * (*g)[r * cols + j];
                    for (std::size_t j = edges[s]; j < edges[s + 1]; ++j) {
                        dx[r * cols + j] += y[r * cols + j] * ((*g)[r * cols + j] - inner);
                    }
                }
            }
        });
    }
    return c;
}

Tensor cross_entropy_from_logits(const Tensor& logits, std::span<const int> targets) {
    require_matrix(logits, "cross_entropy_from_logits");
    const std::size_t rows = logits.rows(), cols = logits.cols();
    if (targets.size() != rows) {
        throw DimensionError("cross_entropy_from_logits: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(rows) + " rows");
    }
    const auto in = logits.data();
    std::vector<double> probs(in.size(), 0.0);
    double loss = 0.0;
    std::size_t counted = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        const int t = targets[r];
        if (t < 0) continue;
        if (static_cast<std::size_t>(t) >= cols) {
            throw ArgumentError("cross_entropy_from_logits: target " + std::to_string(t) + " outside vocabulary of " +
                                std::to_string(cols));
        }
        const double* x = in.data() + r * cols;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, x[j]);
        double total = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            probs[r * cols + j] = std::exp(x[j] - mx);
            total += probs[r * cols + j];
        }
        for (std::size_t j = 0; j < cols; ++j) probs[r * cols + j] /= total;
        loss += (mx + std::log(total)) - x[t];
        ++counted;
    }
    if (counted == 0) throw ArgumentError("cross_entropy_from_logits: no target rows");
    Tensor c = Tensor::scalar(loss / static_cast<double>(counted));
    if (tracked(c, logits)) {
        std::vector<int> tgt(targets.begin(), targets.end());
        record([logits, c, rows, cols, counted, probs = std::move(probs), tgt = std::move(tgt)]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            const double w = (*g)[0] / static_cast<double>(counted);
            auto& dx = logits.raw_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                if (tgt[r] < 0) continue;
                for (std::size_t j = 0; j < cols; ++j) dx[r * cols + j] += w * probs[r * cols + j];
                dx[r * cols + static_cast<std::size_t>(tgt[r])] -= w;
            }
        });
    }
    return c;
}

Tensor outer(const Tensor& u, const Tensor& v) {
    const std::size_t m = u.numel(), n = v.numel();
    const auto x = u.data(), y = v.data();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i] * y[j];
    }
    Tensor c(matrix_shape(m, n), std::move(out));
    if (tracked(c, u, v)) {
        record([u, v, c, m, n]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            const auto x = u.data(), y = v.data();
            if (u.requires_grad()) {
                auto& d = u.raw_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += (*g)[i * n + j] * y[j];
                    d[i] += acc;
                }
            }
            if (v.requires_grad()) {
                auto& d = v.raw_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) d[j] += (*g)[i * n + j] * x[i];
                }
            }
        });
    }
    return c;
}

Tensor dot(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) {
        throw DimensionError("dot of " + shape_to_string(a.shape()) + " and " + shape_to_string(b.shape()));
    }
    const auto x = a.data(), y = b.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
    Tensor c = Tensor::scalar(acc);
    if (tracked(c, a, b)) {
        record([a, b, c]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            const double up = (*g)[0];
            if (a.requires_grad()) {
                auto& d = a.raw_grad();
                const auto y = b.data();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += up * y[i];
            }
            if (b.requires_grad()) {
                auto& d = b.raw_grad();
                const auto x = a.data();
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += up * x[i];
            }
        });
    }
    return c;
}

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    Tensor c = Tensor::scalar(acc);
    if (tracked(c, a)) {
        record([a, c]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            for (double& d : a.raw_grad()) d += (*g)[0];
        });
    }
    return c;
}

Tensor sum_squares(const Tensor& a) { return dot(a, a); }

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
    require_matrix(a, "slice_rows");
    const std::size_t cols = a.cols();
    if (begin >= end || end > a.rows()) {
        throw DimensionError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                             shape_to_string(a.shape()));
    }
    const auto x = a.data();
    std::vector<double> out(x.begin() + static_cast<std::ptrdiff_t>(begin * cols),
                            x.begin() + static_cast<std::ptrdiff_t>(end * cols));
    Tensor c(matrix_shape(end - begin, cols), std::move(out));
    if (tracked(c, a)) {
        record([a, c, begin, cols]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            auto& d = a.raw_grad();
            for (std::size_t i = 0; i < g->size(); ++i) d[begin * cols + i] += (*g)[i];
        });
    }
    return c;
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
    require_matrix(a, "slice_cols");
    const std::size_t rows = a.rows(), cols = a.cols();
    if (begin >= end || end > cols) {
        throw DimensionError("slice_cols [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                             shape_to_string(a.shape()));
    }
    const std::size_t w = end - begin;
    const auto x = a.data();
    std::vector<double> out(rows * w);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(x.data() + r * cols + begin, w, out.data() + r * w);
    }
    Tensor c(matrix_shape(rows, w), std::move(out));
    if (tracked(c, a)) {
        record([a, c, rows, cols, begin, w]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            auto& d = a.raw_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < w; ++j) d[r * cols + begin + j] += (*g)[r * w + j];
            }
        });
    }
    return c;
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw ArgumentError("concat_rows of nothing");
    const std::size_t cols = parts.front().cols();
    std::size_t rows = 0;
    bool grad = false;
    for (const Tensor& p : parts) {
        require_matrix(p, "concat_rows");
        if (p.cols() != cols) {
            throw DimensionError("concat_rows width mismatch: " + shape_to_string(parts.front().shape()) + " vs " +
                                 shape_to_string(p.shape()));
        }
        rows += p.rows();
        grad = grad || p.requires_grad();
    }
    std::vector<double> out;
    out.reserve(rows * cols);
    for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    Tensor c(matrix_shape(rows, cols), std::move(out));
    GradientTape* tape = GradientTape::active();
    const bool on = tape != nullptr && grad;
    c.mark_result(on);
    if (on) {
        std::vector<Tensor> inputs(parts.begin(), parts.end());
        record([inputs = std::move(inputs), c]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            std::size_t offset = 0;
            for (Tensor& p : inputs) {
                const std::size_t n = p.numel();
                if (p.requires_grad()) {
                    auto& d = p.raw_grad();
                    for (std::size_t i = 0; i < n; ++i) d[i] += (*g)[offset + i];
                }
                offset += n;
            }
        });
    }
    return c;
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw ArgumentError("concat_cols of nothing");
    const std::size_t rows = parts.front().rows();
    std::size_t cols = 0;
    bool grad = false;
    for (const Tensor& p : parts) {
        require_matrix(p, "concat_cols");
        if (p.rows() != rows) {
            throw DimensionError("concat_cols height mismatch: " + shape_to_string(parts.front().shape()) + " vs " +
                                 shape_to_string(p.shape()));
        }
        cols += p.cols();
        grad = grad || p.requires_grad();
    }
    std::vector<double> out(rows * cols);
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
        const std::size_t w = p.cols();
        const auto x = p.data();
        for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.data() + r * w, w, out.data() + r * cols + offset);
        offset += w;
    }
    Tensor c(matrix_shape(rows, cols), std::move(out));
    GradientTape* tape = GradientTape::active();
    const bool on = tape != nullptr && grad;
    c.mark_result(on);
    if (on) {
        std::vector<Tensor> inputs(parts.begin(), parts.end());
        record([inputs = std::move(inputs), c, rows, cols]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            std::size_t off = 0;
            for (Tensor& p : inputs) {
                const std::size_t w = p.cols();
                if (p.requires_grad()) {
                    auto& d = p.raw_grad();
                    for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t j = 0; j < w; ++j) d[r * w + j] += (*g)[r * cols + off + j];
                    }
                }
                off += w;
            }
        });
    }
    return c;
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
    require_matrix(table, "gather_rows");
    if (ids.empty()) throw ArgumentError("gather_rows with no ids");
    const std::size_t cols = table.cols(), n_rows = table.rows();
    const auto x = table.data();
    std::vector<double> out(ids.size() * cols);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= n_rows) {
            throw ArgumentError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                                std::to_string(n_rows) + " rows");
        }
        std::copy_n(x.data() + static_cast<std::size_t>(ids[i]) * cols, cols, out.data() + i * cols);
    }
    Tensor c(matrix_shape(ids.size(), cols), std::move(out));
    if (tracked(c, table)) {
        std::vector<int> idx(ids.begin(), ids.end());
        record([table, c, cols, idx = std::move(idx)]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            auto& d = table.raw_grad();
            for (std::size_t i = 0; i < idx.size(); ++i) {
                const std::size_t row = static_cast<std::size_t>(idx[i]);
                for (std::size_t j = 0; j < cols; ++j) d[row * cols + j] += (*g)[i * cols + j];
            }
        });
    }
    return c;
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape " + shape_to_string(a.shape()) + " to " + shape_to_string(shape));
    }
    Tensor c(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
    if (tracked(c, a)) {
        record([a, c]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            auto& d = a.raw_grad();
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += (*g)[i];
        });
    }
    return c;
}

Tensor element(const Tensor& a, std::size_t i) {
    if (i >= a.numel()) {
        throw DimensionError("element " + std::to_string(i) + " of " + shape_to_string(a.shape()));
    }
    Tensor c = Tensor::scalar(a.data()[i]);
    if (tracked(c, a)) {
        record([a, c, i]() mutable {
            const auto* g = upstream(c);
            if (!g) return;
            a.raw_grad()[i] += (*g)[0];
        });
    }
    return c;
}

}  // namespace talora::num
