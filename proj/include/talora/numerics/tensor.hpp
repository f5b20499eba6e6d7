// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace talora::num {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// Tensor is a shared handle: copies alias the same storage. Values are
/// treated as immutable once an operation has consumed them; only leaves
/// (parameters) are written in place, and only by optimizers or loaders.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape);
    static Tensor filled(Shape shape, double value);
    static Tensor scalar(double value);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);
    static Tensor vector(std::initializer_list<double> values);

    bool defined() const noexcept { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;
    /// Rows of a rank-2 tensor; 1 for rank 1 and scalars.
    std::size_t rows() const;
    /// Columns of a rank-2 tensor; numel for rank 1.
    std::size_t cols() const;

    std::span<const double> data() const;
    /// Writable view of the values. Refused on frozen tensors.
    std::span<double> mutable_data();
    double item() const;
    double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

    bool requires_grad() const noexcept;
    /// Marks a leaf as trainable and attaches a zeroed gradient buffer.
    void set_requires_grad(bool on);
    bool has_grad() const noexcept;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    /// Permanently detaches the tensor from training.
    void freeze();
    bool frozen() const noexcept;

    /// Deep copy: new storage, no grad, not frozen.
    Tensor clone() const;

    bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }
    /// Bitwise equality of shape and values.
    bool bit_equal(const Tensor& other) const;

    // Internal hooks used by ops and the tape.
    std::vector<double>& raw_grad() const;
    void mark_result(bool requires_grad);

private:
    struct Impl {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;
        bool requires_grad = false;
        bool frozen = false;
    };
    std::shared_ptr<Impl> impl_;
    Impl& impl() const;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace talora::num
