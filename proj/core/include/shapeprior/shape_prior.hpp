#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "shapeprior/ops.hpp"
#include "shapeprior/tensor.hpp"

// Shape Prior Module: a learnable per-class prior refined by a self-update
// block (global prior) and a cross-update block (enhanced skip features and
// local prior).
namespace shapeprior::spm {

using ops::Extents3;

/// Divisor applied to attention logits. The module's defining formulation
/// divides by sqrt(N), N = number of classes; sqrt(d_k) uses the token
/// feature length instead.
enum class AttentionScale { kSqrtN, kSqrtDk };

std::string to_string(AttentionScale scale);
AttentionScale attention_scale_from_string(const std::string& name);

/// Class-channel prior of shape N x h x w x l.
template <typename T>
struct ShapePrior {
    Tensor<T> values;

    std::size_t classes() const { return values.dim(0); }
    Extents3 extents() const { return ops::spatial_extents(values); }
    std::size_t voxels() const { return values.size() / values.dim(0); }
};

/// Skip feature of shape C x (D/k) x (H/k) x (W/k).
template <typename T>
struct FeatureMap {
    Tensor<T> values;
    std::size_t stage_factor = 1;

    std::size_t channels() const { return values.dim(0); }
    Extents3 extents() const { return ops::spatial_extents(values); }
};

/// Prior extents for a patch: each axis divided by 16, rounded down, at least 1.
Extents3 prior_extents(const Extents3& patch);

constexpr double kPriorInitStd = 0.02;

/// Learnable prior drawn from a normal(0, 0.02) truncated at two standard
/// deviations. Throws std::invalid_argument for n_classes < 2 or a zero extent.
template <typename T>
ShapePrior<T> init_shape_prior(std::size_t n_classes, const Extents3& patch, std::uint64_t seed);

struct SpmConfig {
    std::size_t classes = 2;
    std::size_t channels = 1;       // C of the skip feature at this stage
    std::size_t stage_factor = 2;   // k
    Extents3 prior{1, 1, 1};        // h, w, l
    Extents3 features{1, 1, 1};     // spatial extents of F_o
    std::size_t mlp_ratio = 4;
    AttentionScale scale = AttentionScale::kSqrtN;
};

template <typename T>
struct SelfUpdateWeights {
    // 1x1x1 projections, N -> N; kernels are N x N x 1 x 1 x 1.
    Tensor<T> q_w, q_b, k_w, k_b, v_w, v_b;
    // Layer norms over the hwl feature axis of each class token.
    Tensor<T> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
    // Per-voxel MLP over the class axis, N -> ratio*N -> N.
    ops::MlpWeights<T> mlp;
};

template <typename T>
struct CrossUpdateWeights {
    Tensor<T> q_w, q_b;  // C -> C on the skip feature
    Tensor<T> k_w, k_b;  // N -> N on the upsampled global prior
    Tensor<T> v_w, v_b;  // N -> N on the upsampled global prior
    Tensor<T> conv_w, conv_b;  // C -> N, produces the local prior
};

template <typename T>
struct SpmWeights {
    SpmConfig config;
    SelfUpdateWeights<T> sub;
    CrossUpdateWeights<T> cub;
};

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
SpmWeights<T> init_spm_weights(const SpmConfig& config, std::mt19937_64& rng);

/// Every trainable tensor, in a fixed order, named relative to `prefix`.
template <typename T>
NamedTensors<T> named_parameters(const SpmWeights<T>& weights, const std::string& prefix);

/// Number of scalars in init_spm_weights(config).
std::size_t parameter_count(const SpmConfig& config);

/// N x N row-stochastic class affinity: softmax(Q_s(S) K_s(S)^T / scale).
/// Each class channel is one token whose features are its flattened map.
template <typename T>
Tensor<T> affinity_self(const ShapePrior<T>& prior, const SelfUpdateWeights<T>& w, AttentionScale scale);

/// S' = LN(S_map V_s(S)) + S, then S_G = LN(MLP(S')) + S'.
template <typename T>
ShapePrior<T> self_update_block(const ShapePrior<T>& prior, const SelfUpdateWeights<T>& w, AttentionScale scale);

/// C x N row-stochastic affinity between feature channels and prior classes,
/// with the global prior trilinearly resampled to the feature grid.
/// Throws ShapeError when the feature map does not match the configured stage.
template <typename T>
Tensor<T> affinity_cross(const FeatureMap<T>& features, const ShapePrior<T>& global, const SpmWeights<T>& w);

template <typename T>
struct CrossUpdateResult {
    FeatureMap<T> enhanced;   // F_e
    ShapePrior<T> local;      // S_L
};

/// F_e = C_map V_c(Up(S_G)) + F_o and S_L = Pool(Conv_{C->N}(F_e)).
template <typename T>
CrossUpdateResult<T> cross_update_block(const FeatureMap<T>& features, const ShapePrior<T>& global,
                                        const SpmWeights<T>& w);

template <typename T>
struct SpmOutput {
    FeatureMap<T> enhanced;   // F_e
    ShapePrior<T> prior;      // S_e = S_L + S_G
    ShapePrior<T> global;     // S_G
    ShapePrior<T> local;      // S_L
};

template <typename T>
SpmOutput<T> spm_forward(const FeatureMap<T>& features, const ShapePrior<T>& prior, const SpmWeights<T>& w);

}  // namespace shapeprior::spm
