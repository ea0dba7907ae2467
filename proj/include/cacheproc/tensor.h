#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cacheproc/rng.h"

namespace cacheproc {

enum class DType : uint8_t { F32 = 0, F64 = 1 };

inline size_t dtype_size(DType dt) { return dt == DType::F32 ? 4 : 8; }
inline const char* dtype_name(DType dt) { return dt == DType::F32 ? "f32" : "f64"; }

std::string shape_str(const std::vector<size_t>& shape);

struct TensorImpl {
    std::vector<size_t> shape;
    DType dtype = DType::F32;
    std::vector<float> f32;
    std::vector<double> f64;
    std::vector<float> grad_f32;  // allocated lazily, same length as data
    std::vector<double> grad_f64;
    bool requires_grad = false;
    uint64_t id = 0;

    size_t numel() const { return dtype == DType::F32 ? f32.size() : f64.size(); }
    bool grad_allocated() const { return !grad_f32.empty() || !grad_f64.empty(); }
};

// Dense n-dimensional float tensor. A Tensor is a cheap handle onto shared
// storage; clone() gives an independent copy. Gradient buffers live beside the
// data and are populated by Tape::backward.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(std::vector<size_t> shape, DType dt = DType::F32);
    static Tensor zeros_like(const Tensor& t);
    static Tensor full(std::vector<size_t> shape, double value, DType dt = DType::F32);
    static Tensor from_data(std::vector<size_t> shape, const std::vector<double>& values,
                            DType dt = DType::F32);
    static Tensor scalar(double value, DType dt = DType::F32);
    static Tensor randn(std::vector<size_t> shape, Rng& rng, double stddev,
                        DType dt = DType::F32);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<size_t>& shape() const { return impl_->shape; }
    size_t rank() const { return impl_->shape.size(); }
    size_t dim(size_t i) const { return impl_->shape[i]; }
    size_t numel() const { return impl_->numel(); }
    DType dtype() const { return impl_->dtype; }
    uint64_t id() const { return impl_->id; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    template <class T>
    std::span<const T> data() const;
    template <class T>
    std::span<T> mut_data();

    // Element access with dtype erased; slow, meant for tests and glue code.
    double at(size_t flat) const;
    double at2(size_t row, size_t col) const;  // 2-d only
    void set(size_t flat, double v);
    double item() const;  // numel()==1

    bool has_grad() const { return impl_->grad_allocated(); }
    void alloc_grad();  // zero-filled; no-op if present
    void zero_grad();
    double grad_at(size_t flat) const;  // 0 when no grad buffer
    Tensor grad_tensor() const;         // grads as a plain tensor (zeros when absent)
    template <class T>
    std::span<T> grad();

    Tensor clone() const;      // deep copy of data (grad not copied)
    Tensor to(DType dt) const;
    std::vector<double> to_vector() const;

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

  private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    static std::shared_ptr<TensorImpl> make_impl(std::vector<size_t> shape, DType dt);

    std::shared_ptr<TensorImpl> impl_;
};

size_t shape_numel(const std::vector<size_t>& shape);

}  // namespace cacheproc
