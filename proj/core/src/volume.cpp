#include "shapeprior/volume.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <string>

#include "binary_io.hpp"

namespace shapeprior::data {

namespace {

constexpr char kMagic[4] = {'S', 'P', 'M', 'V'};
enum class DType : std::uint8_t { kF32 = 0, kU8 = 1 };

struct Header {
    DType dtype;
    Extents3 extents;
    Spacing spacing;
};

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    return os;
}

void write_header(std::ostream& os, DType dtype, const Extents3& e, const Spacing& s) {
    os.write(kMagic, 4);
    detail::write_le<std::uint32_t>(os, kSpmvVersion);
    detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
    detail::write_le<std::uint8_t>(os, 3);
    for (auto v : e) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(v));
    for (auto v : s) detail::write_le<float>(os, v);
}

Header read_header(std::istream& is, const std::filesystem::path& path, DType expected) {
    char magic[4];
    if (!is.read(magic, 4)) throw FormatError(path.string() + ": truncated file while reading magic");
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path.string() + ": bad magic, not an SPMV file");
    const auto version = detail::read_le<FormatError, std::uint32_t>(is, "version");
    if (version != kSpmvVersion)
        throw FormatError(path.string() + ": unsupported SPMV version " + std::to_string(version));
    Header h{};
    const auto dtype = detail::read_le<FormatError, std::uint8_t>(is, "dtype");
    if (dtype > 1) throw FormatError(path.string() + ": unknown dtype code " + std::to_string(dtype));
    h.dtype = static_cast<DType>(dtype);
    if (h.dtype != expected)
        throw FormatError(path.string() + (expected == DType::kF32 ? ": expected f32 volume" : ": expected u8 mask"));
    const auto ndim = detail::read_le<FormatError, std::uint8_t>(is, "ndim");
    if (ndim != 3) throw FormatError(path.string() + ": expected 3 dimensions, found " + std::to_string(ndim));
    for (auto& v : h.extents) {
        v = detail::read_le<FormatError, std::uint32_t>(is, "extents");
        if (v == 0) throw FormatError(path.string() + ": zero extent");
    }
    for (auto& v : h.spacing) v = detail::read_le<FormatError, float>(is, "spacing");
    return h;
}

void expect_eof(std::istream& is, const std::filesystem::path& path) {
    if (is.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes after voxel buffer");
}

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    return is;
}

}  // namespace

void write_volume(const std::filesystem::path& path, const Volume& volume) {
    if (volume.voxels.size() != voxel_count(volume.extents)) throw std::invalid_argument("write_volume: buffer size mismatch");
    auto os = open_out(path);
    write_header(os, DType::kF32, volume.extents, volume.spacing);
    detail::write_le_span<float>(os, volume.voxels);
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

Volume read_volume(const std::filesystem::path& path) {
    auto is = open_in(path);
    const Header h = read_header(is, path, DType::kF32);
    Volume v(h.extents, h.spacing);
    detail::read_le_span<FormatError, float>(is, v.voxels, "voxels");
    expect_eof(is, path);
    return v;
}

void write_mask(const std::filesystem::path& path, const MaskVolume& mask) {
    if (mask.labels.size() != voxel_count(mask.extents)) throw std::invalid_argument("write_mask: buffer size mismatch");
    auto os = open_out(path);
    write_header(os, DType::kU8, mask.extents, mask.spacing);
    detail::write_le_span<std::uint8_t>(os, mask.labels);
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

MaskVolume read_mask(const std::filesystem::path& path) {
    auto is = open_in(path);
    const Header h = read_header(is, path, DType::kU8);
    MaskVolume m(h.extents, h.spacing);
    detail::read_le_span<FormatError, std::uint8_t>(is, m.labels, "labels");
    expect_eof(is, path);
    return m;
}

Volume zscore(const Volume& volume) {
    double mean = 0.0;
    for (float v : volume.voxels) mean += v;
    mean /= static_cast<double>(volume.voxels.size());
    double var = 0.0;
    for (float v : volume.voxels) var += (v - mean) * (v - mean);
    var /= static_cast<double>(volume.voxels.size());
    const double sd = std::sqrt(var);
    Volume out = volume;
    for (auto& v : out.voxels) v = sd > 0.0 ? static_cast<float>((v - mean) / sd) : 0.0f;
    return out;
}

void validate_labels(const MaskVolume& mask, std::size_t n_classes) {
    for (auto l : mask.labels)
        if (l >= n_classes)
            throw std::invalid_argument("mask label " + std::to_string(l) + " outside [0, " + std::to_string(n_classes) + ")");
}

}  // namespace shapeprior::data
