#pragma once

#include "stepscope/tensor/tensor.hpp"

namespace stepscope::ops {

// Elementwise (same shape, same dtype). No implicit broadcasting anywhere
// except the trailing-dimension bias_add below; shape mismatches throw.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor gelu(const Tensor& x);

// a + c*b, fused (used by the Euler update and optimizer plumbing).
Tensor add_scaled(const Tensor& a, const Tensor& b, double c);

// Shape ops (always materialized copies; backward is the inverse arrangement).
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);

// Rank-2 matrix product, optionally consuming transposed views of the
// operands. matmul(a, b) is the plain spec operation.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

// Batched rank-3 product: (B,M,K)·(B,K,N) -> (B,M,N), with transpose flags
// applying to the trailing two axes.
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

// The one permitted broadcast: v (K) added along the trailing dim of x (...,K).
Tensor bias_add(const Tensor& x, const Tensor& v);

// Per-example conditioning add: x (B,N,D) + v (B,D) broadcast over N.
Tensor batch_bias_add(const Tensor& x, const Tensor& v);

// Row lookup: table (R,D) -> row (D). Gradient accumulates into the row.
Tensor embed_row(const Tensor& table, int64_t row);

// Reductions.
Tensor reduce_sum(const Tensor& x);   // -> scalar
Tensor reduce_mean(const Tensor& x);  // -> scalar
// sqrt of sum of squares along `axis`; output shape drops that axis.
Tensor reduce_l2(const Tensor& x, int axis);
// mean((a-b)^2) over all elements -> scalar.
Tensor mse(const Tensor& a, const Tensor& b);

// Softmax over the last dim (numerically stabilized per row).
Tensor softmax_lastdim(const Tensor& x);

// LayerNorm over the last dim: gamma, beta of extent x.shape.back().
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// In-place accumulate dst += src (no graph). Used by GradMap and optimizers.
void accumulate_(Tensor& dst, const Tensor& src);

}  // namespace stepscope::ops
