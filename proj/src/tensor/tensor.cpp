#include "stepscope/tensor/tensor.hpp"

#include <cmath>
#include <cstring>

namespace stepscope {

static std::shared_ptr<TensorImpl> make_impl(Shape shape, Dtype dtype) {
  auto impl = std::make_shared<TensorImpl>();
  int64_t n = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->dtype = dtype;
  if (dtype == Dtype::Float32)
    impl->f32.assign(size_t(n), 0.0f);
  else
    impl->f64.assign(size_t(n), 0.0);
  return impl;
}

Tensor Tensor::zeros(Shape shape, Dtype dtype) { return wrap(make_impl(std::move(shape), dtype)); }

Tensor Tensor::full(Shape shape, double value, Dtype dtype) {
  Tensor t = zeros(std::move(shape), dtype);
  if (dtype == Dtype::Float32)
    std::fill(t.impl()->f32.begin(), t.impl()->f32.end(), float(value));
  else
    std::fill(t.impl()->f64.begin(), t.impl()->f64.end(), value);
  return t;
}

Tensor Tensor::scalar(double value, Dtype dtype) { return full({1}, value, dtype); }

Tensor Tensor::from_f32(Shape shape, std::vector<float> data) {
  int64_t n = shape_numel(shape);
  check(n == int64_t(data.size()), "from_f32: shape ", shape_str(shape), " wants ", n,
        " values, got ", data.size());
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = Dtype::Float32;
  impl->f32 = std::move(data);
  return wrap(std::move(impl));
}

Tensor Tensor::from_f64(Shape shape, std::vector<double> data) {
  int64_t n = shape_numel(shape);
  check(n == int64_t(data.size()), "from_f64: shape ", shape_str(shape), " wants ", n,
        " values, got ", data.size());
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = Dtype::Float64;
  impl->f64 = std::move(data);
  return wrap(std::move(impl));
}

std::span<float> Tensor::f32() {
  check(impl_ && impl_->dtype == Dtype::Float32, "tensor: float32 access on ",
        impl_ ? dtype_name(impl_->dtype) : "undefined", " tensor");
  return impl_->f32;
}
std::span<const float> Tensor::f32() const {
  check(impl_ && impl_->dtype == Dtype::Float32, "tensor: float32 access on ",
        impl_ ? dtype_name(impl_->dtype) : "undefined", " tensor");
  return impl_->f32;
}
std::span<double> Tensor::f64() {
  check(impl_ && impl_->dtype == Dtype::Float64, "tensor: float64 access on ",
        impl_ ? dtype_name(impl_->dtype) : "undefined", " tensor");
  return impl_->f64;
}
std::span<const double> Tensor::f64() const {
  check(impl_ && impl_->dtype == Dtype::Float64, "tensor: float64 access on ",
        impl_ ? dtype_name(impl_->dtype) : "undefined", " tensor");
  return impl_->f64;
}

double Tensor::at(int64_t i) const {
  return impl_->dtype == Dtype::Float32 ? double(impl_->f32[size_t(i)]) : impl_->f64[size_t(i)];
}
void Tensor::set(int64_t i, double v) {
  if (impl_->dtype == Dtype::Float32)
    impl_->f32[size_t(i)] = float(v);
  else
    impl_->f64[size_t(i)] = v;
}
double Tensor::item() const {
  check(numel() == 1, "item(): tensor has ", numel(), " elements");
  return at(0);
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  impl->f32 = impl_->f32;
  impl->f64 = impl_->f64;
  return wrap(std::move(impl));
}

Tensor Tensor::detach() const { return clone(); }

Tensor Tensor::astype(Dtype d) const {
  if (d == impl_->dtype) return clone();
  Tensor out = zeros(impl_->shape, d);
  int64_t n = numel();
  for (int64_t i = 0; i < n; ++i) out.set(i, at(i));
  return out;
}

Tensor Tensor::grad() const {
  if (!impl_->grad) return {};
  return wrap(impl_->grad);
}

void Tensor::set_grad(const Tensor& g) {
  if (!g.defined()) {
    impl_->grad = nullptr;
    return;
  }
  check(g.shape() == impl_->shape && g.dtype() == impl_->dtype,
        "set_grad: grad shape/dtype must match tensor");
  impl_->grad = g.impl_ptr();
}

void Tensor::zero_grad() { impl_->grad = nullptr; }

bool Tensor::bit_equal(const Tensor& o) const {
  if (!defined() || !o.defined()) return defined() == o.defined();
  if (impl_->shape != o.impl_->shape || impl_->dtype != o.impl_->dtype) return false;
  if (impl_->dtype == Dtype::Float32)
    return std::memcmp(impl_->f32.data(), o.impl_->f32.data(), impl_->f32.size() * 4) == 0;
  return std::memcmp(impl_->f64.data(), o.impl_->f64.data(), impl_->f64.size() * 8) == 0;
}

void Tensor::check_finite(const char* label) const {
  int64_t n = numel();
  if (impl_->dtype == Dtype::Float32) {
    for (int64_t i = 0; i < n; ++i)
      if (!std::isfinite(impl_->f32[size_t(i)]))
        fail(label, ": non-finite value at flat index ", i);
  } else {
    for (int64_t i = 0; i < n; ++i)
      if (!std::isfinite(impl_->f64[size_t(i)]))
        fail(label, ": non-finite value at flat index ", i);
  }
}

}  // namespace stepscope
