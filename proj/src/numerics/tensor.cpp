// SPDX-License-Identifier: Apache-2.0
#include "talora/numerics/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "talora/errors.hpp"

namespace talora::num {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

Tensor::Tensor(Shape shape, std::vector<double> data) {
    for (std::size_t d : shape) {
        if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_to_string(shape));
    }
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("shape " + shape_to_string(shape) + " needs " + std::to_string(shape_numel(shape)) +
                             " values, got " + std::to_string(data.size()));
    }
    impl_ = std::make_shared<Impl>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
    return Tensor({rows, cols}, std::vector<double>(values));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

Tensor::Impl& Tensor::impl() const {
    if (!impl_) throw StateError("use of an undefined tensor");
    return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }
std::size_t Tensor::numel() const { return impl().data.size(); }

std::size_t Tensor::rows() const {
    const Shape& s = shape();
    return s.size() >= 2 ? shape_numel(Shape(s.begin(), s.end() - 1)) : 1;
}

std::size_t Tensor::cols() const {
    const Shape& s = shape();
    return s.empty() ? 1 : s.back();
}

std::span<const double> Tensor::data() const { return impl().data; }

std::span<double> Tensor::mutable_data() {
    if (impl().frozen) throw StateError("attempt to modify a frozen tensor");
    return impl().data;
}

double Tensor::item() const {
    if (numel() != 1) throw ArgumentError("item() on tensor of shape " + shape_to_string(shape()));
    return impl().data[0];
}

bool Tensor::requires_grad() const noexcept { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
    Impl& self = impl();
    if (on && self.frozen) throw StateError("cannot attach gradients to a frozen tensor");
    self.requires_grad = on;
    if (on) {
        self.grad.assign(self.data.size(), 0.0);
    } else {
        self.grad.clear();
    }
}

bool Tensor::has_grad() const noexcept { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw StateError("tensor has no gradient buffer");
    return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
    if (!has_grad()) throw StateError("tensor has no gradient buffer");
    return impl_->grad;
}

void Tensor::zero_grad() {
    Impl& self = impl();
    if (self.requires_grad) self.grad.assign(self.data.size(), 0.0);
}

void Tensor::freeze() {
    Impl& self = impl();
    self.frozen = true;
    self.requires_grad = false;
    self.grad.clear();
}

bool Tensor::frozen() const noexcept { return impl_ && impl_->frozen; }

Tensor Tensor::clone() const { return Tensor(shape(), impl().data); }

bool Tensor::bit_equal(const Tensor& other) const {
    if (shape() != other.shape()) return false;
    const auto a = data();
    const auto b = other.data();
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

std::vector<double>& Tensor::raw_grad() const {
    Impl& self = impl();
    if (self.grad.empty()) self.grad.assign(self.data.size(), 0.0);
    return self.grad;
}

void Tensor::mark_result(bool requires_grad) { impl().requires_grad = requires_grad; }

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) {
        throw DimensionError("max_abs_diff on " + shape_to_string(a.shape()) + " and " + shape_to_string(b.shape()));
    }
    double m = 0.0;
    const auto x = a.data();
    const auto y = b.data();
    for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x[i] - y[i]));
    return m;
}

}  // namespace talora::num
