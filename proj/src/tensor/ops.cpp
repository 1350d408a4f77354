#include "stepscope/tensor/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <numeric>

#include "stepscope/tensor/autograd.hpp"

namespace stepscope::ops {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MMap = Eigen::Map<RowMat<T>>;

template <typename T>
std::span<const T> data_of(const Tensor& t);
template <>
std::span<const float> data_of<float>(const Tensor& t) {
  return t.f32();
}
template <>
std::span<const double> data_of<double>(const Tensor& t) {
  return t.f64();
}

template <typename T>
std::span<T> mut_data_of(Tensor& t);
template <>
std::span<float> mut_data_of<float>(Tensor& t) {
  return t.f32();
}
template <>
std::span<double> mut_data_of<double>(Tensor& t) {
  return t.f64();
}

void check_same(const Tensor& a, const Tensor& b, const char* op) {
  check(a.defined() && b.defined(), op, ": undefined operand");
  check(a.dtype() == b.dtype(), op, ": dtype mismatch (", dtype_name(a.dtype()), " vs ",
        dtype_name(b.dtype()), ")");
  check(a.shape() == b.shape(), op, ": shape mismatch ", shape_str(a.shape()), " vs ",
        shape_str(b.shape()));
}

template <typename T, typename F>
Tensor elementwise(const Tensor& a, const Tensor& b, F f) {
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  auto pa = data_of<T>(a);
  auto pb = data_of<T>(b);
  auto po = mut_data_of<T>(out);
  for (size_t i = 0; i < po.size(); ++i) po[i] = f(pa[i], pb[i]);
  return out;
}

template <typename T, typename F>
Tensor unary(const Tensor& a, F f) {
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  auto pa = data_of<T>(a);
  auto po = mut_data_of<T>(out);
  for (size_t i = 0; i < po.size(); ++i) po[i] = f(pa[i]);
  return out;
}

template <typename T>
void gemm(const T* a, int64_t ar, int64_t ac, bool ta, const T* b, int64_t br, int64_t bc,
          bool tb, T* c) {
  CMap<T> ma(a, ar, ac), mb(b, br, bc);
  int64_t m = ta ? ac : ar;
  int64_t n = tb ? br : bc;
  MMap<T> mc(c, m, n);
  if (!ta && !tb)
    mc.noalias() = ma * mb;
  else if (ta && !tb)
    mc.noalias() = ma.transpose() * mb;
  else if (!ta && tb)
    mc.noalias() = ma * mb.transpose();
  else
    mc.noalias() = ma.transpose() * mb.transpose();
}

struct MatDims {
  int64_t m, k, n;  // effective product dims after transposition
};

MatDims matmul_dims(const Tensor& a, const Tensor& b, bool ta, bool tb, const char* op,
                    int off) {
  int64_t ar = a.dim(off), ac = a.dim(off + 1);
  int64_t br = b.dim(off), bc = b.dim(off + 1);
  int64_t m = ta ? ac : ar, ka = ta ? ar : ac;
  int64_t kb = tb ? bc : br, n = tb ? br : bc;
  check(ka == kb, op, ": inner extents differ (", ka, " vs ", kb, ") for ",
        shape_str(a.shape()), (ta ? "^T" : ""), " x ", shape_str(b.shape()), (tb ? "^T" : ""));
  return {m, ka, n};
}

}  // namespace

void accumulate_(Tensor& dst, const Tensor& src) {
  check_same(dst, src, "accumulate_");
  if (dst.dtype() == Dtype::Float32) {
    auto d = dst.f32();
    auto s = src.f32();
    for (size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  } else {
    auto d = dst.f64();
    auto s = src.f64();
    for (size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  }
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same(a, b, "add");
  Tensor out = a.dtype() == Dtype::Float32
                   ? elementwise<float>(a, b, [](float x, float y) { return x + y; })
                   : elementwise<double>(a, b, [](double x, double y) { return x + y; });
  autograd::attach_node(out, "add", {a, b}, [a, b](const Tensor& g, autograd::GradMap& gm) {
    if (autograd::needs_graph(a)) gm.add(a, g);
    if (autograd::needs_graph(b)) gm.add(b, g);
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same(a, b, "sub");
  Tensor out = a.dtype() == Dtype::Float32
                   ? elementwise<float>(a, b, [](float x, float y) { return x - y; })
                   : elementwise<double>(a, b, [](double x, double y) { return x - y; });
  autograd::attach_node(out, "sub", {a, b}, [a, b](const Tensor& g, autograd::GradMap& gm) {
    if (autograd::needs_graph(a)) gm.add(a, g);
    if (autograd::needs_graph(b)) gm.add(b, scale(g, -1.0));
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same(a, b, "mul");
  Tensor out = a.dtype() == Dtype::Float32
                   ? elementwise<float>(a, b, [](float x, float y) { return x * y; })
                   : elementwise<double>(a, b, [](double x, double y) { return x * y; });
  autograd::attach_node(out, "mul", {a, b}, [a, b](const Tensor& g, autograd::GradMap& gm) {
    if (autograd::needs_graph(a)) gm.add(a, mul(g, b));
    if (autograd::needs_graph(b)) gm.add(b, mul(g, a));
  });
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = a.dtype() == Dtype::Float32
                   ? unary<float>(a, [c](float x) { return float(x * c); })
                   : unary<double>(a, [c](double x) { return x * c; });
  autograd::attach_node(out, "scale", {a}, [a, c](const Tensor& g, autograd::GradMap& gm) {
    gm.add(a, scale(g, c));
  });
  return out;
}

Tensor add_scaled(const Tensor& a, const Tensor& b, double c) {
  check_same(a, b, "add_scaled");
  Tensor out =
      a.dtype() == Dtype::Float32
          ? elementwise<float>(a, b, [c](float x, float y) { return float(x + c * y); })
          : elementwise<double>(a, b, [c](double x, double y) { return x + c * y; });
  autograd::attach_node(out, "add_scaled", {a, b},
                        [a, b, c](const Tensor& g, autograd::GradMap& gm) {
                          if (autograd::needs_graph(a)) gm.add(a, g);
                          if (autograd::needs_graph(b)) gm.add(b, scale(g, c));
                        });
  return out;
}

Tensor gelu(const Tensor& x) {
  auto fwd = [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); };
  Tensor out = x.dtype() == Dtype::Float32
                   ? unary<float>(x, [&](float v) { return float(fwd(v)); })
                   : unary<double>(x, fwd);
  autograd::attach_node(out, "gelu", {x}, [x](const Tensor& g, autograd::GradMap& gm) {
    auto dfn = [](double v) {
      double phi_cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      double phi_pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      return phi_cdf + v * phi_pdf;
    };
    Tensor dx = Tensor::zeros(x.shape(), x.dtype());
    int64_t n = x.numel();
    if (x.dtype() == Dtype::Float32) {
      auto px = x.f32();
      auto pg = g.f32();
      auto pd = dx.f32();
      for (int64_t i = 0; i < n; ++i) pd[i] = float(pg[i] * dfn(px[i]));
    } else {
      auto px = x.f64();
      auto pg = g.f64();
      auto pd = dx.f64();
      for (int64_t i = 0; i < n; ++i) pd[i] = pg[i] * dfn(px[i]);
    }
    gm.add(x, dx);
  });
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  check(shape_numel(shape) == x.numel(), "reshape: ", shape_str(x.shape()), " -> ",
        shape_str(shape), " changes element count");
  Tensor out = x.clone();
  out.impl()->shape = shape;
  Shape orig = x.shape();
  autograd::attach_node(out, "reshape", {x}, [x, orig](const Tensor& g, autograd::GradMap& gm) {
    gm.add(x, reshape(g, orig));
  });
  return out;
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  int r = x.rank();
  check(int(axes.size()) == r, "permute: axes count ", axes.size(), " != rank ", r);
  std::vector<bool> seen(size_t(r), false);
  Shape out_shape(size_t(r));
  for (int i = 0; i < r; ++i) {
    int a = axes[size_t(i)];
    check(a >= 0 && a < r && !seen[size_t(a)], "permute: invalid axes");
    seen[size_t(a)] = true;
    out_shape[size_t(i)] = x.dim(a);
  }
  Tensor out = Tensor::zeros(out_shape, x.dtype());

  std::vector<int64_t> in_strides(size_t(r), 1), out_strides(size_t(r), 1);
  for (int i = r - 2; i >= 0; --i) {
    in_strides[size_t(i)] = in_strides[size_t(i + 1)] * x.dim(i + 1);
    out_strides[size_t(i)] = out_strides[size_t(i + 1)] * out_shape[size_t(i + 1)];
  }
  // stride of output axis i in the input layout
  std::vector<int64_t> gather(size_t(r));
  for (int i = 0; i < r; ++i) gather[size_t(i)] = in_strides[size_t(axes[size_t(i)])];

  int64_t n = x.numel();
  auto run = [&](auto src, auto dst) {
    std::vector<int64_t> coord(size_t(r), 0);
    int64_t in_idx = 0;
    for (int64_t o = 0; o < n; ++o) {
      dst[size_t(o)] = src[size_t(in_idx)];
      for (int i = r - 1; i >= 0; --i) {
        coord[size_t(i)]++;
        in_idx += gather[size_t(i)];
        if (coord[size_t(i)] < out_shape[size_t(i)]) break;
        in_idx -= gather[size_t(i)] * out_shape[size_t(i)];
        coord[size_t(i)] = 0;
      }
    }
  };
  if (x.dtype() == Dtype::Float32)
    run(x.f32(), out.f32());
  else
    run(x.f64(), out.f64());

  std::vector<int> inverse(size_t(r));
  for (int i = 0; i < r; ++i) inverse[size_t(axes[size_t(i)])] = i;
  autograd::attach_node(out, "permute", {x},
                        [x, inverse](const Tensor& g, autograd::GradMap& gm) {
                          gm.add(x, permute(g, inverse));
                        });
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  check(a.defined() && b.defined(), "matmul: undefined operand");
  check(a.rank() == 2 && b.rank() == 2, "matmul: expects rank-2 operands, got ",
        shape_str(a.shape()), " and ", shape_str(b.shape()));
  check(a.dtype() == b.dtype(), "matmul: dtype mismatch");
  MatDims d = matmul_dims(a, b, trans_a, trans_b, "matmul", 0);
  Tensor out = Tensor::zeros({d.m, d.n}, a.dtype());
  if (a.dtype() == Dtype::Float32)
    gemm<float>(a.f32().data(), a.dim(0), a.dim(1), trans_a, b.f32().data(), b.dim(0), b.dim(1),
                trans_b, out.f32().data());
  else
    gemm<double>(a.f64().data(), a.dim(0), a.dim(1), trans_a, b.f64().data(), b.dim(0),
                 b.dim(1), trans_b, out.f64().data());
  out.check_finite("matmul");
  autograd::attach_node(
      out, "matmul", {a, b}, [a, b, trans_a, trans_b](const Tensor& g, autograd::GradMap& gm) {
        if (autograd::needs_graph(a))
          gm.add(a, trans_a ? matmul(b, g, trans_b, true) : matmul(g, b, false, !trans_b));
        if (autograd::needs_graph(b))
          gm.add(b, trans_b ? matmul(g, a, true, trans_a) : matmul(a, g, !trans_a, false));
      });
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  check(a.rank() == 3 && b.rank() == 3, "bmm: expects rank-3 operands, got ",
        shape_str(a.shape()), " and ", shape_str(b.shape()));
  check(a.dtype() == b.dtype(), "bmm: dtype mismatch");
  check(a.dim(0) == b.dim(0), "bmm: batch extents differ (", a.dim(0), " vs ", b.dim(0), ")");
  MatDims d = matmul_dims(a, b, trans_a, trans_b, "bmm", 1);
  int64_t nb = a.dim(0);
  Tensor out = Tensor::zeros({nb, d.m, d.n}, a.dtype());
  int64_t sa = a.dim(1) * a.dim(2), sb = b.dim(1) * b.dim(2), so = d.m * d.n;
  if (a.dtype() == Dtype::Float32) {
    for (int64_t i = 0; i < nb; ++i)
      gemm<float>(a.f32().data() + i * sa, a.dim(1), a.dim(2), trans_a,
                  b.f32().data() + i * sb, b.dim(1), b.dim(2), trans_b,
                  out.f32().data() + i * so);
  } else {
    for (int64_t i = 0; i < nb; ++i)
      gemm<double>(a.f64().data() + i * sa, a.dim(1), a.dim(2), trans_a,
                   b.f64().data() + i * sb, b.dim(1), b.dim(2), trans_b,
                   out.f64().data() + i * so);
  }
  out.check_finite("bmm");
  autograd::attach_node(
      out, "bmm", {a, b}, [a, b, trans_a, trans_b](const Tensor& g, autograd::GradMap& gm) {
        if (autograd::needs_graph(a))
          gm.add(a, trans_a ? bmm(b, g, trans_b, true) : bmm(g, b, false, !trans_b));
        if (autograd::needs_graph(b))
          gm.add(b, trans_b ? bmm(g, a, true, trans_a) : bmm(a, g, !trans_a, false));
      });
  return out;
}

Tensor bias_add(const Tensor& x, const Tensor& v) {
  check(v.rank() == 1, "bias_add: bias must be rank-1, got ", shape_str(v.shape()));
  check(x.rank() >= 1 && x.shape().back() == v.dim(0), "bias_add: trailing dim ",
        x.shape().back(), " != bias extent ", v.dim(0));
  check(x.dtype() == v.dtype(), "bias_add: dtype mismatch");
  int64_t k = v.dim(0), rows = x.numel() / k;
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  auto run = [&](auto px, auto pv, auto po) {
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < k; ++j) po[size_t(r * k + j)] = px[size_t(r * k + j)] + pv[size_t(j)];
  };
  if (x.dtype() == Dtype::Float32)
    run(x.f32(), v.f32(), out.f32());
  else
    run(x.f64(), v.f64(), out.f64());
  autograd::attach_node(out, "bias_add", {x, v},
                        [x, v, rows, k](const Tensor& g, autograd::GradMap& gm) {
                          if (autograd::needs_graph(x)) gm.add(x, g);
                          if (autograd::needs_graph(v)) {
                            Tensor dv = Tensor::zeros(v.shape(), v.dtype());
                            auto run2 = [&](auto pg, auto pd) {
                              for (int64_t r = 0; r < rows; ++r)
                                for (int64_t j = 0; j < k; ++j)
                                  pd[size_t(j)] += pg[size_t(r * k + j)];
                            };
                            if (g.dtype() == Dtype::Float32)
                              run2(g.f32(), dv.f32());
                            else
                              run2(g.f64(), dv.f64());
                            gm.add(v, dv);
                          }
                        });
  return out;
}

Tensor batch_bias_add(const Tensor& x, const Tensor& v) {
  check(x.rank() == 3 && v.rank() == 2, "batch_bias_add: expects x (B,N,D), v (B,D)");
  check(x.dim(0) == v.dim(0) && x.dim(2) == v.dim(1), "batch_bias_add: shape mismatch ",
        shape_str(x.shape()), " vs ", shape_str(v.shape()));
  check(x.dtype() == v.dtype(), "batch_bias_add: dtype mismatch");
  int64_t bsz = x.dim(0), n = x.dim(1), d = x.dim(2);
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  auto run = [&](auto px, auto pv, auto po) {
    for (int64_t b = 0; b < bsz; ++b)
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j)
          po[size_t((b * n + i) * d + j)] = px[size_t((b * n + i) * d + j)] + pv[size_t(b * d + j)];
  };
  if (x.dtype() == Dtype::Float32)
    run(x.f32(), v.f32(), out.f32());
  else
    run(x.f64(), v.f64(), out.f64());
  autograd::attach_node(
      out, "batch_bias_add", {x, v}, [x, v, bsz, n, d](const Tensor& g, autograd::GradMap& gm) {
        if (autograd::needs_graph(x)) gm.add(x, g);
        if (autograd::needs_graph(v)) {
          Tensor dv = Tensor::zeros(v.shape(), v.dtype());
          auto run2 = [&](auto pg, auto pd) {
            for (int64_t b = 0; b < bsz; ++b)
              for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < d; ++j)
                  pd[size_t(b * d + j)] += pg[size_t((b * n + i) * d + j)];
          };
          if (g.dtype() == Dtype::Float32)
            run2(g.f32(), dv.f32());
          else
            run2(g.f64(), dv.f64());
          gm.add(v, dv);
        }
      });
  return out;
}

Tensor embed_row(const Tensor& table, int64_t row) {
  check(table.rank() == 2, "embed_row: table must be rank-2");
  check(row >= 0 && row < table.dim(0), "embed_row: row ", row, " out of range [0,",
        table.dim(0), ")");
  int64_t d = table.dim(1);
  Tensor out = Tensor::zeros({d}, table.dtype());
  for (int64_t j = 0; j < d; ++j) out.set(j, table.at(row * d + j));
  autograd::attach_node(out, "embed_row", {table},
                        [table, row, d](const Tensor& g, autograd::GradMap& gm) {
                          Tensor dt = Tensor::zeros(table.shape(), table.dtype());
                          for (int64_t j = 0; j < d; ++j) dt.set(row * d + j, g.at(j));
                          gm.add(table, dt);
                        });
  return out;
}

Tensor reduce_sum(const Tensor& x) {
  double acc = 0;
  if (x.dtype() == Dtype::Float32) {
    float facc = 0.0f;
    for (float v : x.f32()) facc += v;
    acc = facc;
  } else {
    for (double v : x.f64()) acc += v;
  }
  Tensor out = Tensor::scalar(acc, x.dtype());
  autograd::attach_node(out, "reduce_sum", {x}, [x](const Tensor& g, autograd::GradMap& gm) {
    gm.add(x, Tensor::full(x.shape(), g.at(0), x.dtype()));
  });
  return out;
}

Tensor reduce_mean(const Tensor& x) {
  int64_t n = x.numel();
  Tensor s = reduce_sum(x);
  return scale(s, 1.0 / double(n));
}

Tensor reduce_l2(const Tensor& x, int axis) {
  check(axis >= 0 && axis < x.rank(), "reduce_l2: axis ", axis, " out of range for rank ",
        x.rank());
  Shape out_shape;
  for (int i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(x.dim(i));
  if (out_shape.empty()) out_shape.push_back(1);

  int64_t ax = x.dim(axis), inner = 1, outer = 1;
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);

  Tensor out = Tensor::zeros(out_shape, x.dtype());
  auto run = [&](auto px, auto po) {
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < inner; ++i) {
        double acc = 0;
        for (int64_t a = 0; a < ax; ++a) {
          double v = double(px[size_t((o * ax + a) * inner + i)]);
          acc += v * v;
        }
        po[size_t(o * inner + i)] = decltype(po[0])(std::sqrt(acc));
      }
  };
  if (x.dtype() == Dtype::Float32)
    run(x.f32(), out.f32());
  else
    run(x.f64(), out.f64());

  Tensor norms = out.clone();
  autograd::attach_node(
      out, "reduce_l2", {x},
      [x, norms, ax, inner, outer](const Tensor& g, autograd::GradMap& gm) {
        // d||v||/dv = v/||v||; zero vector gets subgradient 0
        Tensor dx = Tensor::zeros(x.shape(), x.dtype());
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t i = 0; i < inner; ++i) {
            double nr = norms.at(o * inner + i);
            if (nr == 0.0) continue;
            double gv = g.at(o * inner + i) / nr;
            for (int64_t a = 0; a < ax; ++a) {
              int64_t idx = (o * ax + a) * inner + i;
              dx.set(idx, gv * x.at(idx));
            }
          }
        gm.add(x, dx);
      });
  return out;
}

Tensor mse(const Tensor& a, const Tensor& b) {
  check_same(a, b, "mse");
  int64_t n = a.numel();
  double acc = 0;
  if (a.dtype() == Dtype::Float32) {
    auto pa = a.f32();
    auto pb = b.f32();
    for (int64_t i = 0; i < n; ++i) {
      double d = double(pa[size_t(i)]) - double(pb[size_t(i)]);
      acc += d * d;
    }
  } else {
    auto pa = a.f64();
    auto pb = b.f64();
    for (int64_t i = 0; i < n; ++i) {
      double d = pa[size_t(i)] - pb[size_t(i)];
      acc += d * d;
    }
  }
  Tensor out = Tensor::scalar(acc / double(n), a.dtype());
  out.check_finite("mse");
  autograd::attach_node(out, "mse", {a, b}, [a, b, n](const Tensor& g, autograd::GradMap& gm) {
    double c = 2.0 * g.at(0) / double(n);
    Tensor diff = sub(a.detach(), b.detach());
    if (autograd::needs_graph(a)) gm.add(a, scale(diff, c));
    if (autograd::needs_graph(b)) gm.add(b, scale(diff, -c));
  });
  return out;
}

Tensor softmax_lastdim(const Tensor& x) {
  check(x.rank() >= 1, "softmax: rank must be >= 1");
  int64_t d = x.shape().back(), rows = x.numel() / d;
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  auto run = [&](auto px, auto po) {
    for (int64_t r = 0; r < rows; ++r) {
      auto* in = &px[size_t(r * d)];
      auto* o = &po[size_t(r * d)];
      double mx = double(in[0]);
      for (int64_t j = 1; j < d; ++j) mx = std::max(mx, double(in[j]));
      double sum = 0;
      for (int64_t j = 0; j < d; ++j) {
        double e = std::exp(double(in[j]) - mx);
        o[j] = decltype(o[0])(e);
        sum += e;
      }
      double inv = 1.0 / sum;
      for (int64_t j = 0; j < d; ++j) o[j] = decltype(o[0])(double(o[j]) * inv);
    }
  };
  if (x.dtype() == Dtype::Float32)
    run(x.f32().data(), out.f32().data());
  else
    run(x.f64().data(), out.f64().data());

  std::weak_ptr<TensorImpl> wp = out.impl_ptr();
  autograd::attach_node(out, "softmax", {x},
                        [x, wp, rows, d](const Tensor& g, autograd::GradMap& gm) {
                          auto sp = wp.lock();
                          check(sp != nullptr, "softmax backward: output expired");
                          Tensor p = Tensor::wrap(sp);
                          Tensor dx = Tensor::zeros(x.shape(), x.dtype());
                          auto run2 = [&](auto pp, auto pg, auto pd) {
                            for (int64_t r = 0; r < rows; ++r) {
                              double dot = 0;
                              for (int64_t j = 0; j < d; ++j)
                                dot += double(pp[size_t(r * d + j)]) * double(pg[size_t(r * d + j)]);
                              for (int64_t j = 0; j < d; ++j) {
                                size_t k = size_t(r * d + j);
                                pd[k] = decltype(pd[0])(double(pp[k]) * (double(pg[k]) - dot));
                              }
                            }
                          };
                          if (x.dtype() == Dtype::Float32)
                            run2(p.f32(), g.f32(), dx.f32());
                          else
                            run2(p.f64(), g.f64(), dx.f64());
                          gm.add(x, dx);
                        });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  check(x.rank() >= 1, "layer_norm: rank must be >= 1");
  int64_t d = x.shape().back();
  check(gamma.rank() == 1 && gamma.dim(0) == d, "layer_norm: gamma extent != ", d);
  check(beta.rank() == 1 && beta.dim(0) == d, "layer_norm: beta extent != ", d);
  check(x.dtype() == gamma.dtype() && x.dtype() == beta.dtype(), "layer_norm: dtype mismatch");
  int64_t rows = x.numel() / d;

  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  Tensor mean = Tensor::zeros({rows}, Dtype::Float64);
  Tensor inv_std = Tensor::zeros({rows}, Dtype::Float64);
  auto run = [&](auto px, auto pg, auto pb, auto po) {
    auto pm = mean.f64();
    auto pi = inv_std.f64();
    for (int64_t r = 0; r < rows; ++r) {
      double mu = 0;
      for (int64_t j = 0; j < d; ++j) mu += double(px[size_t(r * d + j)]);
      mu /= double(d);
      double var = 0;
      for (int64_t j = 0; j < d; ++j) {
        double c = double(px[size_t(r * d + j)]) - mu;
        var += c * c;
      }
      var /= double(d);
      double inv = 1.0 / std::sqrt(var + eps);
      pm[size_t(r)] = mu;
      pi[size_t(r)] = inv;
      for (int64_t j = 0; j < d; ++j) {
        size_t k = size_t(r * d + j);
        po[k] = decltype(po[0])((double(px[k]) - mu) * inv * double(pg[size_t(j)]) +
                                double(pb[size_t(j)]));
      }
    }
  };
  if (x.dtype() == Dtype::Float32)
    run(x.f32(), gamma.f32(), beta.f32(), out.f32());
  else
    run(x.f64(), gamma.f64(), beta.f64(), out.f64());
  out.check_finite("layer_norm");

  autograd::attach_node(
      out, "layer_norm", {x, gamma, beta},
      [x, gamma, beta, mean, inv_std, rows, d](const Tensor& g, autograd::GradMap& gm) {
        Tensor dx = Tensor::zeros(x.shape(), x.dtype());
        Tensor dgamma = Tensor::zeros(gamma.shape(), gamma.dtype());
        Tensor dbeta = Tensor::zeros(beta.shape(), beta.dtype());
        auto pm = mean.f64();
        auto pi = inv_std.f64();
        auto loop = [&](auto px, auto pgm, auto pgr, auto pdx, auto pdg, auto pdb) {
          for (int64_t r = 0; r < rows; ++r) {
            double mu = pm[size_t(r)], inv = pi[size_t(r)];
            double sum_g = 0, sum_gx = 0;
            for (int64_t j = 0; j < d; ++j) {
              size_t k = size_t(r * d + j);
              double xn = (double(px[k]) - mu) * inv;
              double gw = double(pgr[k]) * double(pgm[size_t(j)]);
              sum_g += gw;
              sum_gx += gw * xn;
              pdg[size_t(j)] += decltype(pdg[0])(double(pgr[k]) * xn);
              pdb[size_t(j)] += decltype(pdb[0])(double(pgr[k]));
            }
            double inv_d = 1.0 / double(d);
            for (int64_t j = 0; j < d; ++j) {
              size_t k = size_t(r * d + j);
              double xn = (double(px[k]) - mu) * inv;
              double gw = double(pgr[k]) * double(pgm[size_t(j)]);
              pdx[k] = decltype(pdx[0])(inv * (gw - inv_d * sum_g - xn * inv_d * sum_gx));
            }
          }
        };
        if (x.dtype() == Dtype::Float32)
          loop(x.f32(), gamma.f32(), g.f32(), dx.f32(), dgamma.f32(), dbeta.f32());
        else
          loop(x.f64(), gamma.f64(), g.f64(), dx.f64(), dgamma.f64(), dbeta.f64());
        if (autograd::needs_graph(x)) gm.add(x, dx);
        if (autograd::needs_graph(gamma)) gm.add(gamma, dgamma);
        if (autograd::needs_graph(beta)) gm.add(beta, dbeta);
      });
  return out;
}

}  // namespace stepscope::ops
