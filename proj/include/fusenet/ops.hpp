#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include "fusenet/tensor.hpp"

// Differentiable tensor operations.
//
// Broadcasting is limited to leading dimensions: the second operand of
// add/sub/mul may have a shape equal to a suffix of the first operand's shape
// (a bias of shape [C] against activations of shape [B, N, C]). Everything
// else requires identical shapes or an explicit reshape/upsample.
namespace fusenet {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// Identical shapes only.
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor atan(const Tensor& x);

// Elementwise binary cross-entropy on logits; `targets` is treated as data.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Mean over one axis; the axis is removed from the result.
Tensor mean_axis(const Tensor& x, std::ptrdiff_t axis);

// [..., M, K] x [..., K, N]. Batch dims must match, or one operand is a
// plain matrix shared across the other's batch.
Tensor matmul(const Tensor& a, const Tensor& b);

// Numerically stable softmax (max-subtracted) along `axis`.
Tensor softmax(const Tensor& x, std::ptrdiff_t axis);

// Normalizes over the last axis, then applies gamma/beta of shape [C].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

// Cross-correlation. x: [B, C, H, W], weight: [O, C, k, k], bias: [O] or
// undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor transpose(const Tensor& x, std::ptrdiff_t axis0, std::ptrdiff_t axis1);
Tensor concat(std::span<const Tensor> parts, std::ptrdiff_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::ptrdiff_t axis);
std::vector<Tensor> split(const Tensor& x, std::ptrdiff_t axis, const std::vector<std::size_t>& sizes);

// [B, C, H, W] -> [B, C, H*factor, W*factor], each value copied into a
// factor x factor block.
Tensor upsample_nearest(const Tensor& x, std::size_t factor);

// Gathers rows along axis 0.
Tensor index_select(const Tensor& x, std::span<const std::size_t> rows);

std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank);

}  // namespace fusenet
