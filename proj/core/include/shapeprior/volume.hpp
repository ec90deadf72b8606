#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "shapeprior/ops.hpp"

namespace shapeprior::data {

using ops::Extents3;
using Spacing = std::array<float, 3>;

inline std::size_t voxel_count(const Extents3& e) { return e[0] * e[1] * e[2]; }

/// Scalar image, D x H x W, spacing in mm.
struct Volume {
    Extents3 extents{1, 1, 1};
    Spacing spacing{1.0f, 1.0f, 1.0f};
    std::vector<float> voxels;

    Volume() = default;
    Volume(const Extents3& e, const Spacing& s, float fill = 0.0f) : extents(e), spacing(s), voxels(voxel_count(e), fill) {}

    std::size_t index(std::size_t z, std::size_t y, std::size_t x) const { return (z * extents[1] + y) * extents[2] + x; }
    float& at(std::size_t z, std::size_t y, std::size_t x) { return voxels[index(z, y, x)]; }
    float at(std::size_t z, std::size_t y, std::size_t x) const { return voxels[index(z, y, x)]; }
};

/// Class labels, D x H x W.
struct MaskVolume {
    Extents3 extents{1, 1, 1};
    Spacing spacing{1.0f, 1.0f, 1.0f};
    std::vector<std::uint8_t> labels;

    MaskVolume() = default;
    MaskVolume(const Extents3& e, const Spacing& s, std::uint8_t fill = 0)
        : extents(e), spacing(s), labels(voxel_count(e), fill) {}

    std::size_t index(std::size_t z, std::size_t y, std::size_t x) const { return (z * extents[1] + y) * extents[2] + x; }
    std::uint8_t& at(std::size_t z, std::size_t y, std::size_t x) { return labels[index(z, y, x)]; }
    std::uint8_t at(std::size_t z, std::size_t y, std::size_t x) const { return labels[index(z, y, x)]; }
};

class FormatError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// SPMV layout, all little-endian:
//   "SPMV" | version u32 | dtype u8 (0 = f32, 1 = u8) | ndim u8 |
//   extents u32 x ndim | spacing f32 x ndim | raw voxel buffer
constexpr std::uint32_t kSpmvVersion = 1;

void write_volume(const std::filesystem::path& path, const Volume& volume);
Volume read_volume(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const MaskVolume& mask);
MaskVolume read_mask(const std::filesystem::path& path);

/// (v - mean) / std over the whole volume; a constant volume maps to zeros.
Volume zscore(const Volume& volume);

/// Throws std::invalid_argument if any label is >= n_classes.
void validate_labels(const MaskVolume& mask, std::size_t n_classes);

}  // namespace shapeprior::data
