// tensor_ops.hpp - differentiable operations used by the matching network.
//
// Spatial tensors are laid out as [N, C, D, H, W] with W fastest. All ops throw ConfigError on
// shape mismatch.

#pragma once

#include <span>

#include "lmreg/common.hpp"
#include "lmreg/rng.hpp"
#include "lmreg/tensor.hpp"

namespace lmreg::tensor {

// Cross-correlation with stride 1. Kernel size 3 uses padding 1, kernel size 1 uses padding 0,
// so spatial dims are preserved. weight: [Cout, Cin, k, k, k], bias: [Cout].
template <class T> Tensor<T> conv3d(const Tensor<T> &input, const Tensor<T> &weight, const Tensor<T> &bias);

template <class T> Tensor<T> relu(const Tensor<T> &x);
template <class T> Tensor<T> sigmoid(const Tensor<T> &x);

// Max over disjoint 2x2x2 windows. Ties go to the lowest linear index in the window.
template <class T> Tensor<T> maxpool3d(const Tensor<T> &x);

// Trilinear upsampling by an integer factor with half-pixel (align_corners = false) sampling:
// output index o reads input coordinate max(0, (o + 0.5) / factor - 0.5).
template <class T> Tensor<T> upsample_trilinear(const Tensor<T> &x, int factor);

// Values of upsample_trilinear(x, factor) at the listed full-resolution voxels, without
// materializing the upsampled volume. x: [1, C, d, h, w]; result: [K, C].
template <class T>
Tensor<T> gather_upsampled(const Tensor<T> &x, int factor, std::span<const VoxelIndex> voxels);

template <class T> Tensor<T> concat_channels(const Tensor<T> &a, const Tensor<T> &b);

// x: [K, F], weight: [O, F], bias: [O] -> [K, O].
template <class T> Tensor<T> linear(const Tensor<T> &x, const Tensor<T> &weight, const Tensor<T> &bias);

// Weighted binary cross entropy averaged over all elements:
//   -(1/n) sum_e [ w_pos t_e log p_e + w_neg (1 - t_e) log(1 - p_e) ].
// Predictions are clamped into [eps, 1 - eps]; targets must be 0 or 1; a prediction outside
// [0, 1] or NaN throws NumericError.
template <class T>
Tensor<T> bce(const Tensor<T> &pred, std::span<const T> target, T pos_weight = T(1), T neg_weight = T(1));

// a: [K1, F], b: [K2, F] -> [K1, K2] of squared Euclidean distances.
template <class T> Tensor<T> pairwise_l2sq(const Tensor<T> &a, const Tensor<T> &b);

// a: [K1, F], b: [K2, F] -> [K1 * K2, F] with row i * K2 + j = |a_i - b_j|.
template <class T> Tensor<T> pairwise_abs_diff(const Tensor<T> &a, const Tensor<T> &b);

// Elementwise arithmetic on equal shapes.
template <class T> Tensor<T> add(const Tensor<T> &a, const Tensor<T> &b);
template <class T> Tensor<T> sub(const Tensor<T> &a, const Tensor<T> &b);
template <class T> Tensor<T> mul(const Tensor<T> &a, const Tensor<T> &b);
template <class T> Tensor<T> scale(const Tensor<T> &x, T factor);
template <class T> Tensor<T> add_scalar(const Tensor<T> &x, T offset);

template <class T> Tensor<T> sum(const Tensor<T> &x);
template <class T> Tensor<T> mean(const Tensor<T> &x);

// Same values, new shape with equal element count.
template <class T> Tensor<T> reshape(const Tensor<T> &x, Shape shape);

// Normal draws with standard deviation sqrt(2 / fan_in).
template <class T> Tensor<T> he_init(Shape shape, std::int64_t fan_in, SeededRng &rng, bool requires_grad = true);

} // namespace lmreg::tensor
