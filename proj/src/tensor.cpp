#include "cacheproc/tensor.h"

#include <atomic>
#include <sstream>

#include "cacheproc/common.h"

namespace cacheproc {

namespace {
std::atomic<uint64_t> g_next_id{1};
}

std::string shape_str(const std::vector<size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

size_t shape_numel(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) {
        check(d > 0, "tensor shape has a zero dimension: " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::shared_ptr<TensorImpl> Tensor::make_impl(std::vector<size_t> shape, DType dt) {
    auto impl = std::make_shared<TensorImpl>();
    const size_t n = shape_numel(shape);
    impl->shape = std::move(shape);
    impl->dtype = dt;
    if (dt == DType::F32) {
        impl->f32.assign(n, 0.0f);
    } else {
        impl->f64.assign(n, 0.0);
    }
    impl->id = g_next_id.fetch_add(1);
    return impl;
}

Tensor Tensor::zeros(std::vector<size_t> shape, DType dt) {
    return Tensor(make_impl(std::move(shape), dt));
}

Tensor Tensor::zeros_like(const Tensor& t) { return zeros(t.shape(), t.dtype()); }

Tensor Tensor::full(std::vector<size_t> shape, double value, DType dt) {
    Tensor t = zeros(std::move(shape), dt);
    const size_t n = t.numel();
    for (size_t i = 0; i < n; ++i) t.set(i, value);
    return t;
}

Tensor Tensor::from_data(std::vector<size_t> shape, const std::vector<double>& values, DType dt) {
    check(shape_numel(shape) == values.size(),
          "from_data: shape " + shape_str(shape) + " does not match " +
              std::to_string(values.size()) + " values");
    Tensor t = zeros(std::move(shape), dt);
    for (size_t i = 0; i < values.size(); ++i) t.set(i, values[i]);
    return t;
}

Tensor Tensor::scalar(double value, DType dt) { return from_data({1}, {value}, dt); }

Tensor Tensor::randn(std::vector<size_t> shape, Rng& rng, double stddev, DType dt) {
    Tensor t = zeros(std::move(shape), dt);
    const size_t n = t.numel();
    for (size_t i = 0; i < n; ++i) t.set(i, rng.normal(0.0, stddev));
    return t;
}

template <>
std::span<const float> Tensor::data<float>() const {
    check(impl_->dtype == DType::F32, "tensor is not f32");
    return {impl_->f32.data(), impl_->f32.size()};
}

template <>
std::span<const double> Tensor::data<double>() const {
    check(impl_->dtype == DType::F64, "tensor is not f64");
    return {impl_->f64.data(), impl_->f64.size()};
}

template <>
std::span<float> Tensor::mut_data<float>() {
    check(impl_->dtype == DType::F32, "tensor is not f32");
    return {impl_->f32.data(), impl_->f32.size()};
}

template <>
std::span<double> Tensor::mut_data<double>() {
    check(impl_->dtype == DType::F64, "tensor is not f64");
    return {impl_->f64.data(), impl_->f64.size()};
}

double Tensor::at(size_t flat) const {
    return impl_->dtype == DType::F32 ? static_cast<double>(impl_->f32.at(flat))
                                      : impl_->f64.at(flat);
}

double Tensor::at2(size_t row, size_t col) const {
    if (rank() != 2) {
        throw std::runtime_error("at2 requires a 2-d tensor, got " + shape_str(shape()));
    }
    return at(row * dim(1) + col);
}

void Tensor::set(size_t flat, double v) {
    if (impl_->dtype == DType::F32) {
        impl_->f32.at(flat) = static_cast<float>(v);
    } else {
        impl_->f64.at(flat) = v;
    }
}

double Tensor::item() const {
    check(numel() == 1, "item() on tensor of shape " + shape_str(shape()));
    return at(0);
}

void Tensor::alloc_grad() {
    if (impl_->grad_allocated()) return;
    if (impl_->dtype == DType::F32) {
        impl_->grad_f32.assign(impl_->f32.size(), 0.0f);
    } else {
        impl_->grad_f64.assign(impl_->f64.size(), 0.0);
    }
}

void Tensor::zero_grad() {
    if (!impl_->grad_allocated()) {
        alloc_grad();
        return;
    }
    if (impl_->dtype == DType::F32) {
        impl_->grad_f32.assign(impl_->grad_f32.size(), 0.0f);
    } else {
        impl_->grad_f64.assign(impl_->grad_f64.size(), 0.0);
    }
}

double Tensor::grad_at(size_t flat) const {
    if (!impl_->grad_allocated()) return 0.0;
    return impl_->dtype == DType::F32 ? static_cast<double>(impl_->grad_f32.at(flat))
                                      : impl_->grad_f64.at(flat);
}

Tensor Tensor::grad_tensor() const {
    Tensor g = zeros(shape(), dtype());
    if (impl_->grad_allocated()) {
        const size_t n = numel();
        for (size_t i = 0; i < n; ++i) g.set(i, grad_at(i));
    }
    return g;
}

template <>
std::span<float> Tensor::grad<float>() {
    check(impl_->dtype == DType::F32, "tensor is not f32");
    alloc_grad();
    return {impl_->grad_f32.data(), impl_->grad_f32.size()};
}

template <>
std::span<double> Tensor::grad<double>() {
    check(impl_->dtype == DType::F64, "tensor is not f64");
    alloc_grad();
    return {impl_->grad_f64.data(), impl_->grad_f64.size()};
}

Tensor Tensor::clone() const {
    Tensor t = zeros(shape(), dtype());
    t.impl_->f32 = impl_->f32;
    t.impl_->f64 = impl_->f64;
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
}

Tensor Tensor::to(DType dt) const {
    if (dt == dtype()) return clone();
    Tensor t = zeros(shape(), dt);
    const size_t n = numel();
    for (size_t i = 0; i < n; ++i) t.set(i, at(i));
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
}

std::vector<double> Tensor::to_vector() const {
    std::vector<double> out(numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = at(i);
    return out;
}

}  // namespace cacheproc
