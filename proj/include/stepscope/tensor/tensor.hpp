#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "stepscope/common.hpp"

namespace stepscope {

enum class Dtype : uint8_t { Float32 = 0, Float64 = 1 };

inline size_t dtype_size(Dtype d) { return d == Dtype::Float32 ? 4 : 8; }
inline const char* dtype_name(Dtype d) { return d == Dtype::Float32 ? "float32" : "float64"; }

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    check(d > 0, "tensor: non-positive extent ", d, " in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "(";
  for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
  return r + ")";
}

namespace autograd {
struct Node;
class GradMap;
}  // namespace autograd

struct TensorImpl {
  Shape shape;
  Dtype dtype = Dtype::Float32;
  std::vector<float> f32;
  std::vector<double> f64;
  bool requires_grad = false;
  std::shared_ptr<TensorImpl> grad;         // same shape/dtype, leaves only
  std::shared_ptr<autograd::Node> node;     // producing op, empty for leaves

  int64_t numel() const { return dtype == Dtype::Float32 ? int64_t(f32.size()) : int64_t(f64.size()); }
};

// Dense row-major N-d array. Copying a Tensor shares storage; use clone()
// for a deep copy. Values must stay finite; kernels check their outputs.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, Dtype dtype = Dtype::Float32);
  static Tensor full(Shape shape, double value, Dtype dtype = Dtype::Float32);
  static Tensor scalar(double value, Dtype dtype = Dtype::Float32);
  static Tensor from_f32(Shape shape, std::vector<float> data);
  static Tensor from_f64(Shape shape, std::vector<double> data);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return int(impl_->shape.size()); }
  int64_t dim(int i) const { return impl_->shape[size_t(i)]; }
  int64_t numel() const { return impl_->numel(); }
  Dtype dtype() const { return impl_->dtype; }

  std::span<float> f32();
  std::span<const float> f32() const;
  std::span<double> f64();
  std::span<const double> f64() const;

  // dtype-generic element access (by flat row-major index)
  double at(int64_t i) const;
  void set(int64_t i, double v);
  double item() const;  // requires numel()==1

  Tensor clone() const;           // deep copy of data, detached
  Tensor detach() const;          // shares data, no graph linkage
  Tensor astype(Dtype d) const;   // converting copy, detached

  Tensor& set_requires_grad(bool rg) {
    impl_->requires_grad = rg;
    return *this;
  }
  bool requires_grad() const { return impl_->requires_grad; }

  Tensor grad() const;  // undefined Tensor when absent
  void set_grad(const Tensor& g);
  void zero_grad();

  bool same_storage(const Tensor& o) const { return impl_.get() == o.impl_.get(); }
  bool bit_equal(const Tensor& o) const;

  void check_finite(const char* label) const;

  TensorImpl* impl() const { return impl_.get(); }
  std::shared_ptr<TensorImpl> impl_ptr() const { return impl_; }
  static Tensor wrap(std::shared_ptr<TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

  std::shared_ptr<autograd::Node> node() const { return impl_ ? impl_->node : nullptr; }
  void set_node(std::shared_ptr<autograd::Node> n) { impl_->node = std::move(n); }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

}  // namespace stepscope
