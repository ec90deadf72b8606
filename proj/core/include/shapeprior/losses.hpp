#pragma once

#include <cstdint>
#include <span>

#include "shapeprior/tensor.hpp"

namespace shapeprior::harness {

constexpr double kDiceSmooth = 1e-5;

/// 1 - mean over foreground classes (1..N-1) of the soft Dice
/// (2 sum(p g) + eps) / (sum p + sum g + eps), with p = softmax over classes.
/// `logits` is N x spatial; `labels` holds one class id per voxel.
/// Throws ShapeError on a size mismatch or a label >= N.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& logits, std::span<const std::uint8_t> labels);

/// Mean per-voxel negative log-softmax of the target class.
template <typename T>
Tensor<T> ce_loss(const Tensor<T>& logits, std::span<const std::uint8_t> labels);

/// dice_loss + ce_loss.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& logits, std::span<const std::uint8_t> labels);

}  // namespace shapeprior::harness
