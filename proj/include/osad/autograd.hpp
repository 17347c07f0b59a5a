#pragma once

// Minimal reverse-mode automatic differentiation over osad::Tensor.
//
// A Var is a shared handle to a graph node. Leaves created with `parameter`
// accumulate gradients across backward passes until `zero_grad`; leaves
// created with `constant` never receive gradient. Interior nodes keep their
// parents alive, so dropping the loss handle frees the whole graph.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "osad/tensor.hpp"

namespace osad::ad {

struct Node {
  Tensor value;
  Tensor grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer();
};

using Var = std::shared_ptr<Node>;

Var constant(Tensor value);
Var parameter(Tensor value);
/// Same value as `x`, cut from the graph.
Var detach(const Var& x);

/// Runs reverse accumulation from a scalar root (seed 1).
void backward(const Var& root);
void zero_grad(const Var& leaf);

// Elementwise (identical shapes).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var one_minus(const Var& a);
Var relu(const Var& a);
/// x * sigmoid(x)
Var silu(const Var& a);
Var sigmoid(const Var& a);
Var log(const Var& a);
Var exp(const Var& a);
Var square(const Var& a);
Var abs(const Var& a);
Var clamp_min(const Var& a, double lo);
/// log(1 + e^x), stable for large |x|.
Var softplus(const Var& a);
/// Elementwise product with a constant tensor of the same shape.
Var mul_const(const Var& a, const Tensor& mask);

Var reshape(const Var& a, Shape shape);
/// x / s for a scalar node s.
Var div_by_scalar(const Var& x, const Var& s);
/// x[N, K] - r[K] (or r[1, K]) on every row.
Var sub_row_broadcast(const Var& x, const Var& r);

// Reductions.
Var sum(const Var& a);
Var mean(const Var& a);
/// [N, K] -> [N]
Var row_sum(const Var& a);
/// [N, K] -> [K]
Var col_mean(const Var& a);
/// Sum of several scalars, each multiplied by its weight.
Var weighted_sum(std::span<const Var> terms, std::span<const double> weights);

// Matrix ops on rank-2 tensors.
Var matmul(const Var& a, const Var& b);
/// x[N, D] * w[D, O] + bias[O]
Var linear(const Var& x, const Var& w, const Var& bias);
/// m[P, T] (constant) times x[T, ...] viewed as [T, K]; result [P, ...].
Var combine_rows(const Tensor& m, const Var& x);
Var concat_cols(std::span<const Var> parts);
/// Stacks along dim 0; trailing dims must agree.
Var concat_rows(std::span<const Var> parts);
Var slice_cols(const Var& x, std::size_t start, std::size_t count);
/// Rows [start, start+count) along dim 0 of any-rank tensor.
Var slice_rows(const Var& x, std::size_t start, std::size_t count);
/// out[i] = x[i, idx[i]]
Var gather_cols(const Var& x, std::span<const std::size_t> idx);

Var softmax_rows(const Var& x);
Var log_softmax_rows(const Var& x);

// Convolutional ops on [N, C, H, W].
Var conv2d(const Var& x, const Var& w, const Var& bias, std::size_t stride, std::size_t pad);
/// [N, C, H, W] -> [N, C]
Var spatial_mean(const Var& x);
/// a[N, 1, H, W] broadcast over channels of z[N, C, H, W].
Var mul_channel_broadcast(const Var& a, const Var& z);

}  // namespace osad::ad
