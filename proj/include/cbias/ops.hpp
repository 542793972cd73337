#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cbias/tensor.hpp"

// Differentiable primitives. Every function records its adjoint rule on the
// tape when gradient recording is enabled and some input requires grad.
namespace cbias::ops {

// [m x k] * [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// Adjoint is 0 where the input is <= 0.
Tensor relu(const Tensor& a);

// [m x n] + bias broadcast over rows; bias has n elements.
Tensor add_row_bias(const Tensor& a, const Tensor& bias);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);

// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);

// Normalizes every length-d row over the last axis, then applies
// gain/bias (both d elements). Population variance.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// Cross-correlation of x [Cin x H x W] with kernels [Cout x Cin x kh x kw].
// `bias` may be undefined; otherwise it has Cout elements.
Tensor conv2d(const Tensor& x, const Tensor& kernels, const Tensor& bias,
              std::size_t stride = 1, std::size_t padding = 0);

enum class PoolMode { avg, global_avg };
Tensor pool2d(const Tensor& x, PoolMode mode, std::size_t kernel = 0,
              std::size_t stride = 0);

// Broadcasts a [C x 1 x 1] map over an H x W grid (nearest upsampling).
Tensor broadcast_channels(const Tensor& f, std::size_t height, std::size_t width);

Tensor concat(std::span<const Tensor> tensors, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> tensors, std::size_t axis);

// Rows of a [V x D] table selected by index -> [n x D].
Tensor gather_rows(const Tensor& table, std::span<const int> indices);
// Rows [begin, end) of a matrix.
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);

// Norms are stabilized as (||a|| + 1e-12)(||b|| + 1e-12), so zero vectors
// give 0 rather than faulting.
inline constexpr double kCosineEps = 1e-12;
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
// Row-wise cosine of two [B x n] matrices -> [B].
Tensor row_cosine(const Tensor& a, const Tensor& b);

// -log softmax(logits)[target] for a single logit vector.
Tensor cross_entropy(const Tensor& logits, std::size_t target);
// Mean cross entropy over rows of [B x n] logits.
Tensor mean_cross_entropy(const Tensor& logits, std::span<const int> targets);

}  // namespace cbias::ops
