#pragma once

#include <cstddef>
#include <vector>

#include "orup/tensor.hpp"

// Differentiable primitives. Every op records itself on the active tape when
// at least one input requires a gradient; otherwise it is a plain evaluation.
//
// Broadcasting: operands must have equal rank. An operand extent of 1 is
// broadcast against the other operand's extent (the keepdim shape produced by
// reduce_sum). Rank promotion is never implicit; use reshape/expand.
namespace orup {

using DimSet = std::vector<std::size_t>;

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);
// Exact (erf) GELU.
Tensor gelu(const Tensor& a);

// [m,k]x[k,n] or batched [B,m,k]x[B,k,n].
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reduce_sum(const Tensor& x, const DimSet& dims, bool keepdim);
Tensor reduce_mean(const Tensor& x, const DimSet& dims, bool keepdim);
// Sum of all elements, shape [1].
Tensor sum_all(const Tensor& x);

Tensor softmax_last(const Tensor& x);
Tensor log_softmax_last(const Tensor& x);
// Normalizes over the last dimension; no affine parameters.
Tensor layer_norm_last(const Tensor& x, double eps = 1e-5);

// Per-channel normalization of [B,C,H,W] without affine parameters. In
// training mode batch statistics are used and the running buffers are updated
// in place; otherwise the running statistics are used.
Tensor batch_norm2d(const Tensor& x, Tensor& running_mean, Tensor& running_var, bool training,
                    double momentum = 0.1, double eps = 1e-5);

// x [B,Ci,H,W], w [Co,Ci,k,k] -> [B,Co,Ho,Wo].
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t padding);
// [B,C,H,W] -> [B,C]
Tensor global_avg_pool(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm);
Tensor transpose(const Tensor& x, std::size_t d0, std::size_t d1);
Tensor expand(const Tensor& x, const Shape& shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t dim);
Tensor slice(const Tensor& x, std::size_t dim, std::size_t start, std::size_t length);

// Mean over the batch of -sum_k target_k * log_softmax(logits)_k.
Tensor cross_entropy(const Tensor& logits, const Tensor& target_probs);

// Argmax over the last dimension, ties resolved toward the lowest index.
std::vector<std::size_t> argmax_last(const Tensor& x);

}  // namespace orup
