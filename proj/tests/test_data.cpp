#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "shapeprior/dataset.hpp"

namespace fs = std::filesystem;
using namespace shapeprior::data;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("shapeprior_" + tag + "_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::vector<char> slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

void spit(const fs::path& p, const std::vector<char>& bytes) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Floods from every background voxel through non-myocardium voxels using
// connectivity `steps`; returns true if any LV voxel is reached.
bool background_reaches_lv(const MaskVolume& m, const std::vector<std::array<int, 3>>& steps) {
    std::vector<char> seen(m.labels.size(), 0);
    std::deque<std::array<int, 3>> queue;
    for (std::size_t z = 0; z < m.extents[0]; ++z)
        for (std::size_t y = 0; y < m.extents[1]; ++y)
            for (std::size_t x = 0; x < m.extents[2]; ++x)
                if (m.at(z, y, x) == kBackground) {
                    seen[m.index(z, y, x)] = 1;
                    queue.push_back({int(z), int(y), int(x)});
                }
    while (!queue.empty()) {
        const auto p = queue.front();
        queue.pop_front();
        for (const auto& s : steps) {
            const int z = p[0] + s[0], y = p[1] + s[1], x = p[2] + s[2];
            if (z < 0 || y < 0 || x < 0 || z >= int(m.extents[0]) || y >= int(m.extents[1]) || x >= int(m.extents[2]))
                continue;
            const std::size_t i = m.index(z, y, x);
            if (seen[i] || m.labels[i] == kMyocardium) continue;
            if (m.labels[i] == kLeftVentricle) return true;
            seen[i] = 1;
            queue.push_back({z, y, x});
        }
    }
    return false;
}

const std::vector<std::array<int, 3>> kInPlane4 = {{0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
const std::vector<std::array<int, 3>> kVolume6 = {{0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}, {1, 0, 0}, {-1, 0, 0}};

}  // namespace

TEST(VolumeIo, RoundTripIsBitwise) {
    TempDir dir("vol_rt");
    Volume v({3, 5, 7}, {5.0f, 1.5f, 1.25f});
    for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = std::sin(float(i)) * 1e3f + 1e-7f * float(i);
    v.voxels[4] = -0.0f;
    write_volume(dir.path / "a.spmv", v);
    const Volume r = read_volume(dir.path / "a.spmv");
    EXPECT_EQ(r.extents, v.extents);
    EXPECT_EQ(std::memcmp(r.spacing.data(), v.spacing.data(), sizeof(float) * 3), 0);
    ASSERT_EQ(r.voxels.size(), v.voxels.size());
    EXPECT_EQ(std::memcmp(r.voxels.data(), v.voxels.data(), sizeof(float) * v.voxels.size()), 0);
}

TEST(VolumeIo, HeaderIsLittleEndian) {
    TempDir dir("vol_le");
    Volume v({1, 2, 3}, {1.0f, 1.0f, 1.0f}, 1.0f);
    write_volume(dir.path / "a.spmv", v);
    const auto bytes = slurp(dir.path / "a.spmv");
    ASSERT_EQ(bytes.size(), 4u + 4 + 1 + 1 + 12 + 12 + 6 * 4);
    EXPECT_EQ(std::string(bytes.data(), 4), "SPMV");
    EXPECT_EQ(bytes[4], 1);  // version, low byte first
    EXPECT_EQ(bytes[8], 0);  // f32
    EXPECT_EQ(bytes[9], 3);
    EXPECT_EQ(bytes[14], 2);  // H extent
}

TEST(VolumeIo, CorruptedMagicIsFormatError) {
    TempDir dir("vol_magic");
    write_volume(dir.path / "a.spmv", Volume({2, 2, 2}, {1, 1, 1}));
    auto bytes = slurp(dir.path / "a.spmv");
    bytes[0] = 'X';
    spit(dir.path / "a.spmv", bytes);
    EXPECT_THROW(read_volume(dir.path / "a.spmv"), FormatError);
}

TEST(VolumeIo, TruncationAndVersionAreFormatErrors) {
    TempDir dir("vol_trunc");
    write_volume(dir.path / "a.spmv", Volume({2, 2, 2}, {1, 1, 1}));
    auto bytes = slurp(dir.path / "a.spmv");
    spit(dir.path / "short.spmv", std::vector<char>(bytes.begin(), bytes.end() - 3));
    EXPECT_THROW(read_volume(dir.path / "short.spmv"), FormatError);
    bytes[4] = 9;
    spit(dir.path / "v9.spmv", bytes);
    EXPECT_THROW(read_volume(dir.path / "v9.spmv"), FormatError);
}

TEST(VolumeIo, SingleVoxelRoundTrips) {
    TempDir dir("vol_1");
    Volume v({1, 1, 1}, {2.0f, 3.0f, 4.0f}, 42.5f);
    write_volume(dir.path / "a.spmv", v);
    const Volume r = read_volume(dir.path / "a.spmv");
    EXPECT_EQ(r.extents, (Extents3{1, 1, 1}));
    EXPECT_EQ(r.voxels, v.voxels);
}

TEST(MaskIo, RoundTripIsBitwise) {
    TempDir dir("mask_rt");
    MaskVolume m({2, 4, 3}, {5.0f, 1.5f, 1.5f});
    for (std::size_t i = 0; i < m.labels.size(); ++i) m.labels[i] = static_cast<std::uint8_t>(i % 4);
    write_mask(dir.path / "m.spmv", m);
    const MaskVolume r = read_mask(dir.path / "m.spmv");
    EXPECT_EQ(r.extents, m.extents);
    EXPECT_EQ(r.labels, m.labels);
    EXPECT_EQ(r.spacing, m.spacing);
}

TEST(MaskIo, CorruptedMagicIsFormatError) {
    TempDir dir("mask_magic");
    write_mask(dir.path / "m.spmv", MaskVolume({2, 2, 2}, {1, 1, 1}));
    auto bytes = slurp(dir.path / "m.spmv");
    bytes[3] = 'Q';
    spit(dir.path / "m.spmv", bytes);
    EXPECT_THROW(read_mask(dir.path / "m.spmv"), FormatError);
}

TEST(MaskIo, SingleVoxelRoundTrips) {
    TempDir dir("mask_1");
    MaskVolume m({1, 1, 1}, {1, 1, 1}, 3);
    write_mask(dir.path / "m.spmv", m);
    EXPECT_EQ(read_mask(dir.path / "m.spmv").labels, m.labels);
}

TEST(MaskIo, DtypeMismatchIsFormatError) {
    TempDir dir("mask_dtype");
    write_volume(dir.path / "v.spmv", Volume({1, 1, 1}, {1, 1, 1}));
    EXPECT_THROW(read_mask(dir.path / "v.spmv"), FormatError);
}

TEST(Zscore, MomentsAndConstant) {
    Volume v({1, 2, 2}, {1, 1, 1});
    v.voxels = {1, 2, 3, 4};
    const Volume z = zscore(v);
    double mean = 0, sq = 0;
    for (float x : z.voxels) mean += x;
    for (float x : z.voxels) sq += double(x) * x;
    EXPECT_NEAR(mean / 4, 0.0, 1e-6);
    EXPECT_NEAR(sq / 4, 1.0, 1e-5);
    for (float x : zscore(Volume({1, 2, 2}, {1, 1, 1}, 7.0f)).voxels) EXPECT_EQ(x, 0.0f);
}

TEST(ValidateLabels, RejectsOutOfRange) {
    MaskVolume m({1, 1, 2}, {1, 1, 1});
    m.labels = {0, 4};
    EXPECT_THROW(validate_labels(m, 4), std::invalid_argument);
    EXPECT_NO_THROW(validate_labels(m, 5));
}

TEST(GenCase, DeterministicUnderSeed) {
    const auto a = gen_case(11, {4, 32, 32}, 0.1);
    const auto b = gen_case(11, {4, 32, 32}, 0.1);
    EXPECT_EQ(std::memcmp(a.volume.voxels.data(), b.volume.voxels.data(), a.volume.voxels.size() * sizeof(float)), 0);
    EXPECT_EQ(a.mask.labels, b.mask.labels);
    const auto c = gen_case(12, {4, 32, 32}, 0.1);
    EXPECT_NE(a.mask.labels, c.mask.labels);
}

TEST(GenCase, NoiseFreeIsPiecewiseConstant) {
    const auto c = gen_case(5, {6, 48, 40}, 0.0);
    std::map<int, std::set<float>> levels;
    for (std::size_t i = 0; i < c.mask.labels.size(); ++i) levels[c.mask.labels[i]].insert(c.volume.voxels[i]);
    ASSERT_EQ(levels.size(), kSyntheticClasses);
    for (const auto& [label, values] : levels) EXPECT_EQ(values.size(), 1u) << "label " << label;
}

TEST(GenCase, LeftVentricleNestedInMyocardium) {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const auto c = gen_case(seed, {8, 64, 64}, 0.1);
        std::size_t lv = 0;
        for (auto l : c.mask.labels) lv += (l == kLeftVentricle);
        ASSERT_GT(lv, 0u) << "seed " << seed;
        EXPECT_FALSE(background_reaches_lv(c.mask, kInPlane4)) << "seed " << seed;
        EXPECT_FALSE(background_reaches_lv(c.mask, kVolume6)) << "seed " << seed;
    }
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto c = gen_case(seed, {3, 16, 20}, 0.0);
        EXPECT_FALSE(background_reaches_lv(c.mask, kInPlane4)) << "small seed " << seed;
    }
}

TEST(GenCase, AllClassesPresentAndFinite) {
    const auto c = gen_case(3, {8, 64, 64}, 0.1);
    std::set<int> present(c.mask.labels.begin(), c.mask.labels.end());
    EXPECT_EQ(present, (std::set<int>{0, 1, 2, 3}));
    for (float v : c.volume.voxels) ASSERT_TRUE(std::isfinite(v));
}

TEST(GenCase, TooSmallThrows) {
    EXPECT_THROW(gen_case(0, {8, 15, 64}, 0.1), std::invalid_argument);
    EXPECT_THROW(gen_case(0, {8, 64, 8}, 0.1), std::invalid_argument);
}

TEST(SplitCounts, AcdcRatio) {
    EXPECT_EQ(split_counts(100, {0.7, 0.1, 0.2}), (std::array<std::size_t, 3>{70, 10, 20}));
    EXPECT_EQ(split_counts(60, {40.0 / 60, 8.0 / 60, 12.0 / 60}), (std::array<std::size_t, 3>{40, 8, 12}));
    EXPECT_THROW(split_counts(10, {0.5, 0.3, 0.3}), std::invalid_argument);
    EXPECT_THROW(split_counts(10, {1.2, -0.1, -0.1}), std::invalid_argument);
}

class ManifestTest : public ::testing::Test {
  protected:
    static void SetUpTestSuite() {
        dir_ = new TempDir("manifest");
        for (std::size_t i = 0; i < 100; ++i) {
            char id[32];
            std::snprintf(id, sizeof id, "c%03zu", i);
            MaskVolume m({1, 1, 1}, {1, 1, 1}, static_cast<std::uint8_t>(i % 4));
            write_mask(dir_->path / (std::string(id) + "_seg.spmv"), m);
            write_volume(dir_->path / (std::string(id) + "_img.spmv"), Volume({1, 1, 1}, {1, 1, 1}));
        }
    }
    static void TearDownTestSuite() { delete dir_; }
    static TempDir* dir_;
};
TempDir* ManifestTest::dir_ = nullptr;

TEST_F(ManifestTest, HundredCasesSplitSeventyTenTwenty) {
    const auto m = make_manifest(dir_->path, {0.7, 0.1, 0.2}, 3);
    ASSERT_EQ(m.cases.size(), 100u);
    EXPECT_EQ(m.split("train").size(), 70u);
    EXPECT_EQ(m.split("val").size(), 10u);
    EXPECT_EQ(m.split("test").size(), 20u);
    EXPECT_EQ(m.n_classes, 4u);
}

TEST_F(ManifestTest, SameSeedSameSplit) {
    const auto a = make_manifest(dir_->path, {0.7, 0.1, 0.2}, 9);
    const auto b = make_manifest(dir_->path, {0.7, 0.1, 0.2}, 9);
    const auto c = make_manifest(dir_->path, {0.7, 0.1, 0.2}, 10);
    std::vector<std::string> sa, sb, sc;
    for (std::size_t i = 0; i < a.cases.size(); ++i) {
        sa.push_back(a.cases[i].split);
        sb.push_back(b.cases[i].split);
        sc.push_back(c.cases[i].split);
    }
    EXPECT_EQ(sa, sb);
    EXPECT_NE(sa, sc);
}

TEST_F(ManifestTest, BadFractionsThrow) {
    EXPECT_THROW(make_manifest(dir_->path, {0.7, 0.2, 0.2}, 1), std::invalid_argument);
}

TEST_F(ManifestTest, JsonRoundTripAndValidation) {
    const auto m = make_manifest(dir_->path, {0.7, 0.1, 0.2}, 4);
    write_manifest(dir_->path / "manifest.json", m);
    const auto r = read_manifest(dir_->path / "manifest.json");
    ASSERT_EQ(r.cases.size(), m.cases.size());
    for (std::size_t i = 0; i < m.cases.size(); ++i) {
        EXPECT_EQ(r.cases[i].id, m.cases[i].id);
        EXPECT_EQ(r.cases[i].split, m.cases[i].split);
        EXPECT_TRUE(fs::exists(r.volume_path(r.cases[i])));
    }
    EXPECT_EQ(r.seed, 4u);
    EXPECT_EQ(r.generator_version, kGeneratorVersion);

    auto broken = m;
    broken.cases[0].mask = "missing_seg.spmv";
    write_manifest(dir_->path / "broken.json", broken);
    EXPECT_THROW(read_manifest(dir_->path / "broken.json"), std::runtime_error);

    auto dup = m;
    dup.cases.push_back(dup.cases[0]);
    dup.cases.back().split = dup.cases[0].split == "test" ? "train" : "test";
    write_manifest(dir_->path / "dup.json", dup);
    EXPECT_THROW(read_manifest(dir_->path / "dup.json"), std::runtime_error);
}

TEST(GenerateDataset, WritesCasesAndManifest) {
    TempDir dir("gen");
    GenerateOptions opt;
    opt.cases = 10;
    opt.seed = 2;
    opt.extents = {2, 16, 16};
    opt.fractions = {0.6, 0.2, 0.2};
    const auto m = generate_dataset(dir.path, opt);
    EXPECT_EQ(m.cases.size(), 10u);
    EXPECT_EQ(m.split("train").size(), 6u);
    const auto r = read_manifest(dir.path / "manifest.json");
    const auto v = read_volume(r.volume_path(r.cases[0]));
    EXPECT_EQ(v.extents, (Extents3{2, 16, 16}));
    EXPECT_EQ(v.spacing, (Spacing{5.0f, 1.5f, 1.5f}));
    const auto expected = gen_case(case_seed(2, 0), {2, 16, 16}, 0.1);
    EXPECT_EQ(read_mask(r.mask_path(r.cases[0])).labels, expected.mask.labels);
}
