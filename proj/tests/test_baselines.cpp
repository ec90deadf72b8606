#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "shapeprior/baselines.hpp"

using namespace shapeprior::baselines;
using shapeprior::data::Spacing;

namespace {

const Spacing kUnit{1.0f, 1.0f, 1.0f};

Volume noise_volume(const Extents3& e, std::uint64_t seed) {
    Volume v(e, kUnit);
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> n;
    for (auto& x : v.voxels) x = n(rng);
    return v;
}

// out(p) = in(p - t); voxels with no source take `fill`.
template <typename V, typename Fill>
V shifted(const V& in, const Offset3& t, Fill fill) {
    V out = in;
    const auto& e = in.extents;
    for (std::size_t z = 0; z < e[0]; ++z)
        for (std::size_t y = 0; y < e[1]; ++y)
            for (std::size_t x = 0; x < e[2]; ++x) {
                const long sz = long(z) - t[0], sy = long(y) - t[1], sx = long(x) - t[2];
                const bool inside = sz >= 0 && sy >= 0 && sx >= 0 && sz < long(e[0]) && sy < long(e[1]) && sx < long(e[2]);
                out.at(z, y, x) = inside ? in.at(sz, sy, sx) : fill;
            }
    return out;
}

MaskVolume blob_mask(const Extents3& e, std::size_t cz, std::size_t cy, std::size_t cx, std::uint8_t label) {
    MaskVolume m(e, kUnit);
    for (std::size_t z = 0; z < e[0]; ++z)
        for (std::size_t y = 0; y < e[1]; ++y)
            for (std::size_t x = 0; x < e[2]; ++x)
                if (std::abs(long(z) - long(cz)) <= 1 && std::abs(long(y) - long(cy)) <= 2 && std::abs(long(x) - long(cx)) <= 2)
                    m.at(z, y, x) = label;
    return m;
}

Volume image_of(const MaskVolume& m, std::uint64_t seed) {
    Volume v(m.extents, kUnit);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 0.05f);
    for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = float(m.labels[i]) + u(rng);
    return v;
}

}  // namespace

TEST(RegisterTranslation, IdentityIsZero) {
    const Volume v = noise_volume({6, 10, 9}, 1);
    const Registration r = register_translation(v, v, 2);
    EXPECT_EQ(r.translation, (Offset3{0, 0, 0}));
    EXPECT_EQ(r.score, 0.0);
}

TEST(RegisterTranslation, RecoversConstructedShift) {
    const Volume source = noise_volume({8, 12, 12}, 2);
    for (int radius : {2, 3}) {
        const Volume target = shifted(source, {2, 0, 1}, 5.0f);
        EXPECT_EQ(register_translation(source, target, radius).translation, (Offset3{2, 0, 1})) << radius;
    }
    const Volume target = shifted(source, {-1, 2, -2}, -3.0f);
    EXPECT_EQ(register_translation(source, target, 2).translation, (Offset3{-1, 2, -2}));
}

TEST(RegisterTranslation, ConstantImagesTieToZero) {
    const Volume a({4, 6, 6}, kUnit, 1.5f);
    EXPECT_EQ(register_translation(a, a, 3).translation, (Offset3{0, 0, 0}));
}

TEST(RegisterTranslation, FlatAxisIsNotSearched) {
    const Volume source = noise_volume({1, 12, 12}, 3);
    const Volume target = shifted(source, {0, 1, -1}, 0.0f);
    EXPECT_EQ(register_translation(source, target, 2).translation, (Offset3{0, 1, -1}));
}

TEST(RegisterTranslation, Errors) {
    const Volume a({2, 2, 2}, kUnit);
    EXPECT_THROW(register_translation(a, a, -1), std::invalid_argument);
    EXPECT_THROW(register_translation(a, Volume({2, 2, 3}, kUnit), 1), std::invalid_argument);
}

TEST(AtlasSegment, ExactRecoveryWhenTestIsABase) {
    const Extents3 e{6, 16, 16};
    std::vector<AtlasPair> bases;
    bases.push_back({noise_volume(e, 10), blob_mask(e, 2, 5, 5, 1)});
    const MaskVolume gt = blob_mask(e, 3, 9, 8, 2);
    bases.push_back({image_of(gt, 11), gt});
    bases.push_back({noise_volume(e, 12), blob_mask(e, 3, 10, 11, 3)});
    for (double temperature : {0.0, 1e-3}) {
        const auto r = atlas_segment(bases[1].image, bases, 2, temperature);
        EXPECT_EQ(r.mask.labels, gt.labels) << temperature;
        EXPECT_NEAR(r.weights[1], 1.0, 1e-12);
        double total = 0;
        for (double w : r.weights) total += w;
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(AtlasSegment, VoteTieGoesToLowerClass) {
    const Extents3 e{2, 4, 4};
    const Volume img(e, kUnit, 0.0f);
    std::vector<AtlasPair> bases = {{img, MaskVolume(e, kUnit, 2)}, {img, MaskVolume(e, kUnit, 1)}};
    const auto r = atlas_segment(img, bases, 1, 1.0);
    EXPECT_DOUBLE_EQ(r.weights[0], 0.5);
    for (auto l : r.mask.labels) EXPECT_EQ(l, 1);

    // Disjoint foregrounds: each foreground voxel ties with background.
    const Extents3 wide{2, 10, 10};
    const Volume flat(wide, kUnit, 0.0f);
    std::vector<AtlasPair> disjoint = {{flat, blob_mask(wide, 0, 2, 2, 1)}, {flat, blob_mask(wide, 1, 7, 7, 2)}};
    for (auto l : atlas_segment(flat, disjoint, 1, 1.0).mask.labels) EXPECT_EQ(l, 0);
}

TEST(AtlasSegment, ShiftedCopyRecoversShiftedMask) {
    const Extents3 e{6, 16, 16};
    const MaskVolume gt = blob_mask(e, 2, 6, 7, 3);
    const Volume base = image_of(gt, 21);
    const Offset3 t{1, -2, 2};
    const Volume test = shifted(base, t, 0.0f);
    const std::vector<AtlasPair> bases = {{base, gt}};
    const auto r = atlas_segment(test, bases, 2, 0.0);
    EXPECT_EQ(r.registrations[0].translation, t);
    EXPECT_EQ(r.mask.labels, shifted(gt, t, std::uint8_t{0}).labels);
}

TEST(AtlasSegment, Errors) {
    const Volume v({2, 2, 2}, kUnit);
    EXPECT_THROW(atlas_segment(v, std::span<const AtlasPair>{}, 1, 1.0), std::invalid_argument);
    const std::vector<AtlasPair> bases = {{v, MaskVolume({2, 2, 2}, kUnit)}};
    EXPECT_THROW(atlas_segment(v, bases, 1, -1.0), std::invalid_argument);
    EXPECT_THROW(atlas_segment(Volume({2, 2, 3}, kUnit), bases, 1, 1.0), std::invalid_argument);
}

TEST(GmmFitEm, SingleComponentIsSampleMoments) {
    std::vector<float> x = {1.0f, 2.0f, 4.0f, 7.0f, 7.5f};
    double mean = 0, var = 0;
    for (float v : x) mean += v;
    mean /= 5;
    for (float v : x) var += (v - mean) * (v - mean);
    var /= 5;
    const auto g = gmm_fit_em(x, 1, 0);
    EXPECT_NEAR(g.means[0], mean, 1e-12);
    EXPECT_NEAR(g.variances[0], var, 1e-12);
    EXPECT_DOUBLE_EQ(g.weights[0], 1.0);
}

class TwoClusters : public ::testing::TestWithParam<std::uint64_t> {
  protected:
    std::vector<float> samples() const {
        std::mt19937_64 rng(GetParam());
        std::normal_distribution<float> a(0.0f, 0.01f), b(10.0f, 0.01f);
        std::vector<float> x;
        for (int i = 0; i < 300; ++i) x.push_back(a(rng));
        for (int i = 0; i < 200; ++i) x.push_back(b(rng));
        std::shuffle(x.begin(), x.end(), rng);
        return x;
    }
};

TEST_P(TwoClusters, MeansRecovered) {
    const auto g = gmm_fit_em(samples(), 2, GetParam());
    EXPECT_NEAR(g.means[0], 0.0, 0.1);
    EXPECT_NEAR(g.means[1], 10.0, 0.1);
    EXPECT_NEAR(g.weights[0], 0.6, 1e-6);
    EXPECT_FALSE(g.degenerate);
}

TEST_P(TwoClusters, LogLikelihoodNonDecreasing) {
    std::mt19937_64 rng(GetParam());
    std::normal_distribution<float> n(0.0f, 1.0f);
    std::vector<float> x;
    for (int i = 0; i < 400; ++i) x.push_back(n(rng) + (i % 3 == 0 ? 2.5f : 0.0f));
    for (std::size_t k : {2, 3, 4}) {
        const auto g = gmm_fit_em(x, k, GetParam(), 300, 0.0);
        ASSERT_GE(g.log_likelihood.size(), 2u);
        for (std::size_t i = 1; i < g.log_likelihood.size(); ++i)
            EXPECT_GE(g.log_likelihood[i] - g.log_likelihood[i - 1], -1e-9) << "k=" << k << " iter " << i;
    }
}

TEST_P(TwoClusters, SegmentationMatchesMidpointThreshold) {
    const auto g = gmm_fit_em(samples(), 2, GetParam());
    Volume v({1, 1, 101}, kUnit);
    for (std::size_t i = 0; i < 101; ++i) v.voxels[i] = -0.5f + 0.11f * float(i);
    const MaskVolume m = gmm_segment(v, g);
    for (std::size_t i = 0; i < 101; ++i) {
        if (std::abs(v.voxels[i] - 5.0f) < 1.0f) continue;  // variances differ slightly near the boundary
        EXPECT_EQ(m.labels[i], v.voxels[i] > 5.0f ? 1 : 0) << v.voxels[i];
    }
}

INSTANTIATE_TEST_SUITE_P(Seeds, TwoClusters, ::testing::Values(1u, 2u, 3u));

TEST(GmmFitEm, DegenerateInputIsFlagged) {
    const std::vector<float> x(50, 3.0f);
    const auto g = gmm_fit_em(x, 2, 0);
    EXPECT_TRUE(g.degenerate);
    for (double v : g.variances) EXPECT_EQ(v, kVarianceFloor);
    for (double m : g.means) EXPECT_EQ(m, 3.0);
    EXPECT_THROW(gmm_fit_em(x, 0, 0), std::invalid_argument);
    EXPECT_THROW(gmm_fit_em(std::span<const float>{}, 1, 0), std::invalid_argument);
}

TEST(GmmFitEm, DeterministicUnderSeed) {
    std::vector<float> x;
    for (int i = 0; i < 100; ++i) x.push_back(float(i % 7) + 0.01f * float(i));
    const auto a = gmm_fit_em(x, 3, 4), b = gmm_fit_em(x, 3, 4);
    EXPECT_EQ(a.means, b.means);
    EXPECT_EQ(a.log_likelihood, b.log_likelihood);
}

TEST(GmmSegment, EqualComponentsSplitAtMidpoint) {
    GaussianMixture g;
    g.means = {1.0, 3.0};
    g.variances = {0.5, 0.5};
    g.weights = {0.5, 0.5};
    Volume v({1, 1, 5}, kUnit);
    v.voxels = {1.0f, 1.999f, 2.0f, 2.001f, 3.0f};
    EXPECT_EQ(gmm_segment(v, g).labels, (std::vector<std::uint8_t>{0, 0, 0, 1, 1}));  // x = 2 ties to class 0
}

TEST(GmmSegment, DominantComponentAtItsMean) {
    GaussianMixture g;
    g.means = {0.0, 1.0, 4.0};
    g.variances = {1.0, 0.1, 1.0};
    g.weights = {0.2, 0.6, 0.2};
    Volume v({1, 1, 1}, kUnit, 1.0f);
    EXPECT_EQ(gmm_segment(v, g).labels[0], 1);
}

TEST(GmmSegment, InvariantToCommonWeightScale) {
    GaussianMixture g;
    g.means = {0.0, 1.0, 2.5};
    g.variances = {0.3, 0.2, 0.5};
    g.weights = {0.5, 0.3, 0.2};
    Volume v = noise_volume({2, 8, 8}, 5);
    const MaskVolume a = gmm_segment(v, g);
    for (auto& w : g.weights) w *= 7.0;
    EXPECT_EQ(gmm_segment(v, g).labels, a.labels);
}

TEST(RankComponentLabels, ByMeanOrder) {
    GaussianMixture g;
    g.means = {0.1, 0.4, 0.8, 0.95};
    g.variances = {1, 1, 1, 1};
    g.weights = {0.25, 0.25, 0.25, 0.25};
    const std::vector<double> class_means = {0.12, 0.77, 0.42, 0.93};  // bg, RV, Myo, LV
    EXPECT_EQ(rank_component_labels(g, class_means), (std::vector<std::uint8_t>{0, 2, 1, 3}));
}
