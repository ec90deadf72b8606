#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "shapeprior/volume.hpp"

namespace shapeprior::data {

// Label scheme of the synthetic cardiac-like scenes.
enum Label : std::uint8_t { kBackground = 0, kRightVentricle = 1, kMyocardium = 2, kLeftVentricle = 3 };
constexpr std::size_t kSyntheticClasses = 4;
constexpr const char* kGeneratorVersion = "cardiac-synth-1";
constexpr std::size_t kMinInPlaneExtent = 16;

struct SyntheticCase {
    Volume volume;
    MaskVolume mask;
};

/// One synthetic short-axis stack: a left-ventricle disk inside a myocardial
/// annulus with a right-ventricle crescent beside it, tapering towards the
/// last slice. Centre, radii and class intensities are drawn from `seed`;
/// Gaussian noise of `noise_sigma` is added. Throws std::invalid_argument if
/// an in-plane extent is below 16.
SyntheticCase gen_case(std::uint64_t seed, const Extents3& extents, double noise_sigma);

struct CaseEntry {
    std::string id;
    std::string volume;  // relative to the manifest directory
    std::string mask;
    std::string split;   // "train", "val" or "test"
};

struct DatasetManifest {
    std::filesystem::path root;  // directory holding the manifest; not serialized
    std::size_t n_classes = kSyntheticClasses;
    std::uint64_t seed = 0;
    std::string generator_version = kGeneratorVersion;
    std::vector<CaseEntry> cases;

    std::vector<CaseEntry> split(const std::string& tag) const;
    std::filesystem::path volume_path(const CaseEntry& c) const { return root / c.volume; }
    std::filesystem::path mask_path(const CaseEntry& c) const { return root / c.mask; }
};

using SplitFractions = std::array<double, 3>;  // train, val, test

/// Split sizes: round(f_train * n), round(f_val * n), remainder to test.
std::array<std::size_t, 3> split_counts(std::size_t n, const SplitFractions& fractions);

/// Scans `dir` for <id>_img.spmv / <id>_seg.spmv pairs and assigns them to
/// splits by a seeded shuffle. Throws std::invalid_argument if the fractions
/// are negative or do not sum to 1.
DatasetManifest make_manifest(const std::filesystem::path& dir, const SplitFractions& fractions, std::uint64_t seed);

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

/// Parses and validates a manifest: every path exists and no case id
/// appears in two splits.
DatasetManifest read_manifest(const std::filesystem::path& path);

struct GenerateOptions {
    std::size_t cases = 60;
    std::uint64_t seed = 0;
    Extents3 extents{8, 64, 64};
    double noise_sigma = 0.1;
    Spacing spacing{5.0f, 1.5f, 1.5f};
    SplitFractions fractions{40.0 / 60.0, 8.0 / 60.0, 12.0 / 60.0};
};

/// Writes `cases` synthetic cases plus manifest.json into `dir`.
DatasetManifest generate_dataset(const std::filesystem::path& dir, const GenerateOptions& options);

/// Per-case seed used by generate_dataset.
std::uint64_t case_seed(std::uint64_t dataset_seed, std::size_t index);

}  // namespace shapeprior::data
