#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "shapeprior/shape_prior.hpp"

// Residual U-shaped encoder/decoder with the shape prior module on the
// k = 2, 4, 8 skip connections.
namespace shapeprior::model {

using ops::Extents3;
using spm::NamedTensors;

constexpr std::size_t kEncoderStages = 4;
constexpr std::size_t kSpmStages = 3;

struct ModelConfig {
    std::size_t in_channels = 1;
    std::size_t n_classes = 4;
    std::size_t base_width = 8;               // widths double per stage: 8/16/32/64
    std::array<std::size_t, 3> stage_factors{2, 4, 8};
    bool spm_enabled = true;
    Extents3 patch{8, 64, 64};
    std::uint64_t seed = 0;
    // Depth of the 3x3 convolution kernels; 1 gives in-plane 1x3x3 kernels.
    // Stages whose depth extent is 1 always use 1.
    std::size_t kernel_depth = 3;
    std::size_t blocks_per_stage = 2;
    spm::AttentionScale attention_scale = spm::AttentionScale::kSqrtN;
};

std::string config_to_json(const ModelConfig& config);
/// Missing keys keep their defaults; unknown keys are rejected.
ModelConfig config_from_json(const std::string& text);

/// Throws std::invalid_argument unless every patch axis is 1 or divisible
/// by 8, the stage factors are {2, 4, 8} and the widths are positive.
void validate(const ModelConfig& config);

/// Spatial extents of encoder stage s (s = 0 is full resolution). Axes of
/// extent 1 are never downsampled.
Extents3 stage_extents(const ModelConfig& config, std::size_t stage);
std::size_t stage_width(const ModelConfig& config, std::size_t stage);

/// SPM configuration for SPM stage i (i = 1 is the deepest skip, k = 8).
spm::SpmConfig spm_stage_config(const ModelConfig& config, std::size_t spm_stage);

/// Conv + instance norm; the conv carries no bias since the norm absorbs it.
template <typename T>
struct ConvNorm {
    Tensor<T> kernel, gamma, beta;
    ops::Conv3dParams params;
};

template <typename T>
struct ResBlock {
    ConvNorm<T> conv1, conv2;
    std::optional<ConvNorm<T>> projection;  // strided or width-changing shortcut
};

template <typename T>
struct EncoderStage {
    std::optional<ConvNorm<T>> stem;  // stage 0 only
    std::vector<ResBlock<T>> blocks;
};

template <typename T>
struct DecoderStage {
    ConvNorm<T> fuse;  // concat(up(deeper), skip) -> skip width
    ResBlock<T> block;
};

/// Per-stage record of the last forward pass, detached from the graph.
template <typename T>
struct StageSnapshot {
    std::size_t spm_stage = 0;       // 1 = deepest
    std::size_t stage_factor = 0;
    Tensor<T> features_in;           // F_o
    Tensor<T> features_out;          // F_e (== F_o when the module is off)
    Tensor<T> prior;                 // S_e; undefined when the module is off
    Tensor<T> global;                // S_G
    Tensor<T> local;                 // S_L
};

template <typename T>
class UNetModel {
  public:
    ModelConfig config;
    std::array<EncoderStage<T>, kEncoderStages> encoder;
    std::array<DecoderStage<T>, kEncoderStages - 1> decoder;  // decoder[s] produces stage s
    Tensor<T> head_w, head_b;
    std::vector<spm::SpmWeights<T>> spm;  // index 0 is SPM stage 1 (k = 8)
    spm::ShapePrior<T> prior;             // stage-1 learnable prior

    /// Every trainable tensor in a fixed order; names are stable across runs.
    NamedTensors<T> parameters() const;
    std::size_t parameter_count() const;

    const std::vector<StageSnapshot<T>>& last_stages() const;
    void record_stages(std::vector<StageSnapshot<T>> stages) { last_stages_ = std::move(stages); }
    bool has_forward() const { return last_stages_.has_value(); }

  private:
    std::optional<std::vector<StageSnapshot<T>>> last_stages_;
};

/// Deterministic under config.seed. Encoder/decoder/head weights come from
/// one stream and the SPM weights and prior from others, so toggling
/// spm_enabled leaves the shared weights identical.
template <typename T>
UNetModel<T> build_model(const ModelConfig& config);

/// Analytic parameter total for a config (independent of build_model).
std::size_t parameter_count(const ModelConfig& config);

/// logits N x D x H x W for an input in_channels x D x H x W. Throws
/// ShapeError when the input does not match the configured patch.
template <typename T>
Tensor<T> forward(UNetModel<T>& model, const Tensor<T>& volume);

/// Runs forward without recording gradients and returns the stage
/// snapshots, ordered deepest first.
template <typename T>
std::vector<StageSnapshot<T>> export_stage_priors(UNetModel<T>& model, const Tensor<T>& volume);

/// Snapshots of the most recent forward. Throws std::logic_error before any forward.
template <typename T>
const std::vector<StageSnapshot<T>>& export_stage_priors(const UNetModel<T>& model);

// Checkpoint, all little-endian:
//   "SPMC" | version u32 | config JSON (u32 length + bytes) | tensor count u32 |
//   per tensor: name (u32 length + bytes), ndim u8, dims u32 x ndim, offset u64 |
//   f32 buffers, concatenated in manifest order
constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::filesystem::path& path, const UNetModel<float>& model);
UNetModel<float> load_checkpoint(const std::filesystem::path& path);

/// FNV-1a over the bytes of every parameter, in parameter order.
template <typename T>
std::uint64_t parameter_checksum(const UNetModel<T>& model);

}  // namespace shapeprior::model
