#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "shapeprior/backbone.hpp"
#include "shapeprior/dataset.hpp"
#include "shapeprior/metrics.hpp"

namespace shapeprior::harness {

struct AugmentFlags {
    bool flip = true;
    bool rotate = true;  // 90 degree in-plane turns; only used when H == W
};

struct TrainConfig {
    std::filesystem::path manifest;
    model::ModelConfig model;
    std::size_t epochs = 30;
    std::size_t batch_size = 2;
    double lr = 3e-4;
    std::size_t warmup_epochs = 3;
    double weight_decay = 1e-2;
    std::uint64_t seed = 0;
    AugmentFlags augment;
    std::filesystem::path out_dir = "run";
    std::size_t threads = 1;  // recorded for reproducibility; only 1 is supported
};

/// Parses a training config. Relative paths resolve against `base_dir`.
/// The model seed defaults to the training seed when "model.seed" is absent.
/// Throws std::invalid_argument on unknown keys or violated invariants
/// (epochs >= 1, warmup <= epochs, batch >= 1, threads == 1).
TrainConfig train_config_from_json(const std::string& text, const std::filesystem::path& base_dir = {});
std::string train_config_to_json(const TrainConfig& config);
void validate(const TrainConfig& config);

struct LoadedCase {
    std::string id;
    Tensorf volume;  // 1 x D x H x W, z-scored
    data::MaskVolume mask;
};

std::vector<LoadedCase> load_split(const data::DatasetManifest& manifest, const std::string& split);

/// Random axis flips and in-plane quarter turns, applied identically to
/// image and labels.
void augment(LoadedCase& sample, const AugmentFlags& flags, std::mt19937_64& rng);

/// Per-voxel argmax of the logits; ties go to the lower class.
data::MaskVolume predict(model::UNetModel<float>& model, const LoadedCase& sample);

struct EvalReport {
    MetricsRecord record;
    std::vector<CaseMetrics> cases;
};

EvalReport evaluate(model::UNetModel<float>& model, const std::vector<LoadedCase>& cases, std::size_t epoch,
                    const std::string& split);
EvalReport evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
                    const std::string& split);

struct TrainResult {
    std::vector<double> train_loss;   // per epoch, mean over samples
    std::vector<MetricsRecord> val;   // per epoch
    std::size_t best_epoch = 0;
    double best_val_dice = -1.0;
    std::filesystem::path checkpoint;
};

using Logger = std::function<void(const std::string&)>;

/// Writes <out_dir>/metrics.csv (one validation row per epoch),
/// <out_dir>/loss.csv, <out_dir>/config.json and <out_dir>/best.spmc (the
/// epoch with the highest mean validation Dice; earlier epoch on ties).
/// Throws NumericError on a non-finite loss.
TrainResult train(const TrainConfig& config, const Logger& log = {});

/// Files written by export_attention for a model with `n_classes` classes.
std::size_t expected_export_files(std::size_t n_classes, bool spm_enabled);

struct ExportSummary {
    std::vector<std::filesystem::path> files;
    std::vector<model::StageSnapshot<float>> stages;
};

/// For each SPM stage and each class channel of S_G, S_L and S_e: the
/// central depth slice as a min-max normalized 8-bit PGM (a constant slice
/// maps to mid-gray 128), plus all values in priors.csv. Also the
/// channel-mean of F_o and F_e per stage as a PGM pair sharing one
/// intensity range, with values in features.csv.
ExportSummary export_attention(model::UNetModel<float>& model, const Tensorf& volume, const std::filesystem::path& out_dir);
ExportSummary export_attention(const std::filesystem::path& checkpoint, const std::filesystem::path& volume,
                               const std::filesystem::path& out_dir);

/// Mean of an S_e channel, trilinearly resized to the mask grid, inside
/// and outside the voxels labelled with that channel's class.
struct Localisation {
    std::size_t stage, channel;
    double inside, outside;
};
std::vector<Localisation> prior_localisation(const std::vector<model::StageSnapshot<float>>& stages,
                                             const data::MaskVolume& mask);

/// 8-bit binary PGM (P5), row-major, `width` x `height`.
void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height, const std::vector<std::uint8_t>& pixels);
/// Min-max normalization to 0..255; a constant input maps to 128.
std::vector<std::uint8_t> to_gray(const std::vector<float>& values, float lo, float hi);

}  // namespace shapeprior::harness
