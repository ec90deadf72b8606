#pragma once

#include <array>
#include <cstddef>

#include "shapeprior/tensor.hpp"

// Differentiable tensor primitives. Every op is instantiated for float and
// double; double is used by the gradient checker.
namespace shapeprior::ops {

using Extents3 = std::array<std::size_t, 3>;

// Elementwise (identical shapes).
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T value);
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.01));

// Reductions to a one-element tensor.
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

/// Same buffer, new extents.
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// Transpose of a rank-2 tensor.
template <typename T> Tensor<T> transpose(const Tensor<T>& x);
/// a[M x K] * b[K x P].
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Softmax along `axis` with max subtraction.
template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis);

constexpr double kLayerNormEps = 1e-5;

/// Normalizes every slice along the last axis, then applies gamma/beta
/// (each the size of the last axis).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(kLayerNormEps));

/// Per-channel normalization over the spatial extent of a C x D x H x W
/// tensor, with per-channel affine (instance norm for a single sample).
template <typename T>
Tensor<T> channel_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       T eps = T(kLayerNormEps));

/// x[R x K] * w[K x P] + bias[P].
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

template <typename T>
struct MlpWeights {
    Tensor<T> w1;  // features x hidden
    Tensor<T> b1;  // hidden
    Tensor<T> w2;  // hidden x features
    Tensor<T> b2;  // features
};

/// linear -> GELU -> linear over the last axis of a rank-2 input.
template <typename T> Tensor<T> mlp(const Tensor<T>& x, const MlpWeights<T>& weights);

struct Conv3dParams {
    Extents3 stride{1, 1, 1};
    Extents3 padding{0, 0, 0};
};

/// Cross-correlation (the kernel is not flipped) of x[C_in x D x H x W] with
/// kernel[C_out x C_in x kd x kh x kw]; bias[C_out] may be undefined.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias,
                 const Conv3dParams& params = {});

/// Trilinear resampling of C x D x H x W to C x out; align_corners = false
/// (half-pixel centres, edge clamping).
template <typename T> Tensor<T> resize_trilinear(const Tensor<T>& x, const Extents3& out);
template <typename T> Tensor<T> upsample_trilinear(const Tensor<T>& x, std::size_t factor);

/// Non-overlapping window means; every spatial extent must divide by its factor.
template <typename T> Tensor<T> downsample_avg(const Tensor<T>& x, const Extents3& factor);
template <typename T> Tensor<T> downsample_avg(const Tensor<T>& x, std::size_t factor);

/// Average-pools C x D x H x W down to C x target. Axes that do not divide
/// are replicate-padded at the high end up to factor * target first, with
/// factor = ceil(extent / target).
template <typename T> Tensor<T> pool_to_extents(const Tensor<T>& x, const Extents3& target);

/// Concatenation along axis 0.
template <typename T> Tensor<T> concat0(const Tensor<T>& a, const Tensor<T>& b);

/// Spatial extents of a C x D x H x W tensor.
template <typename T> Extents3 spatial_extents(const Tensor<T>& x);

}  // namespace shapeprior::ops
