#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "shapeprior/volume.hpp"

namespace shapeprior::harness {

using data::MaskVolume;
using data::Spacing;

/// HD95 of a class missing from either mask. Excluded from means.
constexpr double kHd95Absent = -1.0;

/// 2|A n B| / (|A| + |B|) for the voxels labelled `class_id`; 1.0 when the
/// class is absent from both masks. Throws std::invalid_argument if the
/// extents differ.
double dice_score(const MaskVolume& pred, const MaskVolume& gt, std::uint8_t class_id);

/// 95th percentile (linear interpolation) of the pooled distances from each
/// boundary voxel of one mask to the nearest boundary voxel of the other,
/// both directions, in mm. A boundary voxel has a 6-neighbour outside the
/// class or outside the volume. Returns kHd95Absent when the class is
/// missing from either mask.
double hd95(const MaskVolume& pred, const MaskVolume& gt, std::uint8_t class_id, const Spacing& spacing);

/// Linear-interpolated percentile q in [0, 100] of unsorted values.
double percentile(std::vector<double> values, double q);

struct CaseMetrics {
    std::string id;
    std::vector<double> dice;  // index = class id, background included
    std::vector<double> hd95;
};

CaseMetrics case_metrics(const std::string& id, const MaskVolume& pred, const MaskVolume& gt, std::size_t n_classes);

struct MetricsRecord {
    std::size_t epoch = 0;
    std::string split;
    std::vector<double> dice;  // per class, averaged over cases
    std::vector<double> hd95;  // per class, over cases where defined; kHd95Absent if none
    double mean_dice = 0.0;    // over foreground classes
    double mean_hd95 = kHd95Absent;
};

/// Per-class means over cases, then means over the foreground classes.
MetricsRecord aggregate(const std::vector<CaseMetrics>& cases, std::size_t epoch, const std::string& split);

constexpr const char* kMetricsHeader = "epoch,split,class,dice,hd95";

/// One "mean" row, or one row per foreground class followed by "mean".
std::string metrics_rows(const MetricsRecord& record, bool per_class);

}  // namespace shapeprior::harness
