#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "reference_spm.hpp"
#include "shapeprior/gradcheck.hpp"
#include "shapeprior/shape_prior.hpp"

using namespace shapeprior;
using namespace shapeprior::spm;
namespace o = shapeprior::ops;

namespace {

Tensord random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensord t(std::move(shape));
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

SpmConfig config(std::size_t n, std::size_t c, o::Extents3 prior, o::Extents3 features, std::size_t k = 2) {
    SpmConfig cfg;
    cfg.classes = n;
    cfg.channels = c;
    cfg.prior = prior;
    cfg.features = features;
    cfg.stage_factor = k;
    return cfg;
}

// Rebuilds a weight set whose tensors are `params`, in named_parameters order.
SpmWeights<double> rebind(const SpmWeights<double>& like, const std::vector<Tensord>& params, std::size_t offset) {
    SpmWeights<double> w = like;
    std::vector<Tensord*> slots{&w.sub.q_w, &w.sub.q_b, &w.sub.k_w, &w.sub.k_b, &w.sub.v_w, &w.sub.v_b,
                                &w.sub.ln1_gamma, &w.sub.ln1_beta, &w.sub.mlp.w1, &w.sub.mlp.b1,
                                &w.sub.mlp.w2, &w.sub.mlp.b2, &w.sub.ln2_gamma, &w.sub.ln2_beta,
                                &w.cub.q_w, &w.cub.q_b, &w.cub.k_w, &w.cub.k_b, &w.cub.v_w, &w.cub.v_b,
                                &w.cub.conv_w, &w.cub.conv_b};
    for (std::size_t i = 0; i < slots.size(); ++i) *slots[i] = params.at(offset + i);
    return w;
}

std::vector<Tensord> parameter_values(const SpmWeights<double>& w) {
    std::vector<Tensord> out;
    for (const auto& [name, t] : named_parameters(w, "")) out.push_back(t.detach());
    return out;
}

// Random weights with non-trivial biases and layer-norm affines.
SpmWeights<double> random_weights(const SpmConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto w = init_spm_weights<double>(cfg, rng);
    std::vector<Tensord> params;
    std::uint64_t s = seed * 101;
    for (const auto& [name, t] : named_parameters(w, "")) {
        const bool gamma = name.find("gamma") != std::string::npos;
        params.push_back(gamma ? random_tensor(t.shape(), ++s, 0.5, 1.5) : random_tensor(t.shape(), ++s, -0.6, 0.6));
    }
    return rebind(w, params, 0);
}

ShapePrior<double> random_prior(std::size_t n, o::Extents3 e, std::uint64_t seed) {
    return {random_tensor({n, e[0], e[1], e[2]}, seed)};
}

FeatureMap<double> random_features(std::size_t c, o::Extents3 e, std::size_t k, std::uint64_t seed) {
    return {random_tensor({c, e[0], e[1], e[2]}, seed), k};
}

void expect_equal(const Tensord& a, const Tensord& b) {
    ASSERT_EQ(a.shape(), b.shape());
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a.at(i), b.at(i)) << "at " << i;
}

void expect_near(const Tensord& a, const reference::Mat& m, double tol) {
    const std::size_t cols = m[0].size();
    ASSERT_EQ(a.size(), m.size() * cols);
    for (std::size_t r = 0; r < m.size(); ++r)
        for (std::size_t c = 0; c < cols; ++c) EXPECT_NEAR(a.at(r * cols + c), m[r][c], tol);
}

}  // namespace

TEST(InitShapePrior, DeterministicUnderSeed) {
    auto a = init_shape_prior<float>(4, {32, 32, 32}, 7);
    auto b = init_shape_prior<float>(4, {32, 32, 32}, 7);
    auto c = init_shape_prior<float>(4, {32, 32, 32}, 8);
    EXPECT_TRUE(std::equal(a.values.data().begin(), a.values.data().end(), b.values.data().begin()));
    EXPECT_FALSE(std::equal(a.values.data().begin(), a.values.data().end(), c.values.data().begin()));
    EXPECT_TRUE(a.values.requires_grad());
    for (float v : a.values.data()) EXPECT_LE(std::abs(v), 2.0f * kPriorInitStd + 1e-7);
}

TEST(InitShapePrior, SixteenthOfPatch) {
    EXPECT_EQ(init_shape_prior<float>(4, {128, 128, 128}, 1).values.shape(), (Shape{4, 8, 8, 8}));
    EXPECT_EQ(init_shape_prior<float>(4, {20, 256, 256}, 1).values.shape(), (Shape{4, 1, 16, 16}));
    EXPECT_EQ(prior_extents({8, 64, 64}), (o::Extents3{1, 4, 4}));
}

TEST(InitShapePrior, RejectsDegenerateInput) {
    EXPECT_THROW(init_shape_prior<float>(1, {16, 16, 16}, 1), std::invalid_argument);
    EXPECT_THROW(init_shape_prior<float>(3, {0, 16, 16}, 1), std::invalid_argument);
}

TEST(AffinitySelf, IdenticalChannelsGiveUniformRows) {
    const std::size_t n = 3;
    auto w = random_weights(config(n, 2, {2, 2, 2}, {2, 2, 2}), 1);
    Tensord eye({n, n, 1, 1, 1});
    for (std::size_t i = 0; i < n; ++i) eye.at(i * n + i) = 1.0;
    w.sub.q_w = eye;
    w.sub.k_w = eye;
    w.sub.q_b = Tensord::zeros({n});
    w.sub.k_b = Tensord::zeros({n});
    Tensord values({n, 2, 2, 2});
    for (std::size_t c = 0; c < n; ++c)
        for (std::size_t v = 0; v < 8; ++v) values.at(c * 8 + v) = 0.1 * static_cast<double>(v) - 0.3;
    auto a = affinity_self(ShapePrior<double>{values}, w.sub, AttentionScale::kSqrtN);
    for (double e : a.data()) EXPECT_NEAR(e, 1.0 / 3.0, 1e-15);
}

TEST(AffinitySelf, ScalarHandComputation) {
    // N = 2, one voxel: q = Wq s + bq, k = Wk s + bk, logits q_i k_j / sqrt(2).
    auto w = random_weights(config(2, 1, {1, 1, 1}, {1, 1, 1}), 2);
    w.sub.q_w = Tensord({2, 2, 1, 1, 1}, {1, 2, 0, 1});
    w.sub.q_b = Tensord({2}, {0.1, 0.0});
    w.sub.k_w = Tensord({2, 2, 1, 1, 1}, {0.5, 0, 1, -1});
    w.sub.k_b = Tensord({2}, {0.0, 0.2});
    ShapePrior<double> s{Tensord({2, 1, 1, 1}, {0.3, -0.7})};
    const double q[2] = {-1.0, -0.7}, k[2] = {0.15, 1.2};
    auto a = affinity_self(s, w.sub, AttentionScale::kSqrtN);
    for (int i = 0; i < 2; ++i) {
        const double l0 = q[i] * k[0] / std::sqrt(2.0), l1 = q[i] * k[1] / std::sqrt(2.0);
        const double p0 = 1.0 / (1.0 + std::exp(l1 - l0));
        EXPECT_NEAR(a.at(i * 2 + 0), p0, 1e-14);
        EXPECT_NEAR(a.at(i * 2 + 1), 1.0 - p0, 1e-14);
    }
}

TEST(AffinitySelf, DivisorIsSqrtNotClassCountUnlessConfigured) {
    const auto cfg = config(3, 2, {2, 2, 2}, {2, 2, 2});
    auto w = random_weights(cfg, 3);
    auto s = random_prior(3, {2, 2, 2}, 4);
    const auto ms = reference::from_tensor(s.values, 3);
    const auto q = reference::project(ms, w.sub.q_w, w.sub.q_b);
    const auto k = reference::project(ms, w.sub.k_w, w.sub.k_b);
    expect_near(affinity_self(s, w.sub, AttentionScale::kSqrtN), reference::attention(q, k, std::sqrt(3.0)), 1e-13);
    expect_near(affinity_self(s, w.sub, AttentionScale::kSqrtDk), reference::attention(q, k, std::sqrt(8.0)), 1e-13);
}

TEST(SelfUpdate, ZeroBranchesReturnPriorExactly) {
    auto w = random_weights(config(4, 2, {2, 3, 2}, {2, 3, 2}), 5);
    w.sub.v_w = Tensord::zeros(w.sub.v_w.shape());
    w.sub.v_b = Tensord::zeros(w.sub.v_b.shape());
    for (auto* t : {&w.sub.mlp.w1, &w.sub.mlp.b1, &w.sub.mlp.w2, &w.sub.mlp.b2}) *t = Tensord::zeros(t->shape());
    w.sub.ln1_gamma = Tensord::ones(w.sub.ln1_gamma.shape());
    w.sub.ln2_gamma = Tensord::ones(w.sub.ln2_gamma.shape());
    w.sub.ln1_beta = Tensord::zeros(w.sub.ln1_beta.shape());
    w.sub.ln2_beta = Tensord::zeros(w.sub.ln2_beta.shape());
    auto s = random_prior(4, {2, 3, 2}, 6);
    expect_equal(self_update_block(s, w.sub, AttentionScale::kSqrtN).values, s.values);
}

TEST(SelfUpdate, MatchesStraightLineOracle) {
    for (std::uint64_t seed : {7u, 8u, 9u}) {
        auto w = random_weights(config(3, 2, {2, 2, 2}, {2, 2, 2}), seed);
        auto s = random_prior(3, {2, 2, 2}, seed + 50);
        auto out = self_update_block(s, w.sub, AttentionScale::kSqrtN);
        EXPECT_EQ(out.values.shape(), s.values.shape());
        expect_near(out.values, reference::self_update(reference::from_tensor(s.values, 3), w.sub, std::sqrt(3.0)), 1e-12);
    }
}

TEST(SelfUpdate, ClassPermutationEquivariance) {
    const std::size_t n = 4;
    const auto cfg = config(n, 3, {1, 2, 3}, {1, 2, 3});
    for (std::uint64_t seed = 10; seed < 15; ++seed) {
        auto w = random_weights(cfg, seed);
        auto s = random_prior(n, {1, 2, 3}, seed + 1);
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), std::mt19937_64(seed));

        const std::size_t m = 6, hidden = w.sub.mlp.b1.size();
        auto permute_rows = [&](const Tensord& t, std::size_t cols) {
            Tensord out(t.shape());
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < cols; ++c) out.at(i * cols + c) = t.at(perm[i] * cols + c);
            return out;
        };
        auto permute_square = [&](const Tensord& t) {
            Tensord out(t.shape());
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) out.at(i * n + j) = t.at(perm[i] * n + perm[j]);
            return out;
        };
        auto pw = w;
        pw.sub.q_w = permute_square(w.sub.q_w);
        pw.sub.k_w = permute_square(w.sub.k_w);
        pw.sub.v_w = permute_square(w.sub.v_w);
        pw.sub.q_b = permute_rows(w.sub.q_b, 1);
        pw.sub.k_b = permute_rows(w.sub.k_b, 1);
        pw.sub.v_b = permute_rows(w.sub.v_b, 1);
        pw.sub.mlp.w1 = permute_rows(w.sub.mlp.w1, hidden);
        pw.sub.mlp.b2 = permute_rows(w.sub.mlp.b2, 1);
        Tensord w2(w.sub.mlp.w2.shape());
        for (std::size_t j = 0; j < hidden; ++j)
            for (std::size_t i = 0; i < n; ++i) w2.at(j * n + i) = w.sub.mlp.w2.at(j * n + perm[i]);
        pw.sub.mlp.w2 = w2;

        auto base = self_update_block(s, w.sub, AttentionScale::kSqrtN);
        auto permuted = self_update_block(ShapePrior<double>{permute_rows(s.values, m)}, pw.sub, AttentionScale::kSqrtN);
        auto expected = permute_rows(base.values, m);
        for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(permuted.values.at(i), expected.at(i), 1e-12);
    }
}

TEST(AffinityCross, ConstantInputsGiveUniformRows) {
    auto w = random_weights(config(3, 4, {1, 2, 2}, {2, 4, 4}), 16);
    // Identical key rows: every prior class projects to the same key.
    Tensord kw({3, 3, 1, 1, 1});
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) kw.at(i * 3 + j) = 0.2 * static_cast<double>(j) - 0.1;
    w.cub.k_w = kw;
    w.cub.k_b = Tensord::zeros({3});
    auto a = affinity_cross(FeatureMap<double>{Tensord({4, 2, 4, 4}, 0.7), 2}, ShapePrior<double>{Tensord({3, 1, 2, 2}, -0.4)}, w);
    ASSERT_EQ(a.shape(), (Shape{4, 3}));
    for (double e : a.data()) EXPECT_NEAR(e, 1.0 / 3.0, 1e-14);
}

TEST(AffinityCross, SmallCaseMatchesOracle) {
    const auto cfg = config(2, 2, {2, 2, 2}, {2, 2, 2});
    auto w = random_weights(cfg, 17);
    auto f = random_features(2, {2, 2, 2}, 2, 18);
    auto g = random_prior(2, {2, 2, 2}, 19);
    auto ref = reference::cross_update_same_grid(reference::from_tensor(f.values, 2), reference::from_tensor(g.values, 2),
                                                 w.cub, std::sqrt(2.0));
    expect_near(affinity_cross(f, g, w), ref.affinity, 1e-13);
}

TEST(AffinityCross, ShapeIsChannelsByClasses) {
    for (auto fe : {o::Extents3{2, 4, 4}, o::Extents3{3, 5, 7}, o::Extents3{1, 8, 2}}) {
        const auto cfg = config(3, 5, {1, 2, 1}, fe);
        auto w = random_weights(cfg, 20);
        auto a = affinity_cross(random_features(5, fe, 2, 21), random_prior(3, {1, 2, 1}, 22), w);
        EXPECT_EQ(a.shape(), (Shape{5, 3}));
    }
}

TEST(AffinityCross, StageMismatchThrows) {
    const auto cfg = config(3, 4, {1, 2, 2}, {2, 4, 4}, 4);
    auto w = random_weights(cfg, 23);
    auto g = random_prior(3, {1, 2, 2}, 24);
    EXPECT_THROW(affinity_cross(random_features(4, {2, 4, 4}, 2, 25), g, w), ShapeError);   // wrong k
    EXPECT_THROW(affinity_cross(random_features(4, {4, 8, 8}, 4, 25), g, w), ShapeError);   // wrong extents
    EXPECT_THROW(affinity_cross(random_features(3, {2, 4, 4}, 4, 25), g, w), ShapeError);   // wrong channels
    EXPECT_NO_THROW(affinity_cross(random_features(4, {2, 4, 4}, 4, 25), g, w));
}

TEST(CrossUpdate, ZeroValueProjectionKeepsFeaturesExactly) {
    const auto cfg = config(3, 4, {1, 2, 2}, {2, 4, 4});
    auto w = random_weights(cfg, 26);
    w.cub.v_w = Tensord::zeros(w.cub.v_w.shape());
    w.cub.v_b = Tensord::zeros(w.cub.v_b.shape());
    auto f = random_features(4, {2, 4, 4}, 2, 27);
    auto r = cross_update_block(f, random_prior(3, {1, 2, 2}, 28), w);
    expect_equal(r.enhanced.values, f.values);
}

TEST(CrossUpdate, SingleChannelMatchesOracle) {
    const auto cfg = config(1, 1, {2, 2, 2}, {2, 2, 2});
    auto w = random_weights(cfg, 29);
    auto f = random_features(1, {2, 2, 2}, 2, 30);
    auto g = random_prior(1, {2, 2, 2}, 31);
    auto r = cross_update_block(f, g, w);
    auto ref = reference::cross_update_same_grid(reference::from_tensor(f.values, 1), reference::from_tensor(g.values, 1),
                                                 w.cub, 1.0);
    expect_near(r.enhanced.values, ref.enhanced, 1e-13);
    expect_near(r.local.values, ref.local, 1e-13);
}

TEST(CrossUpdate, TwoByTwoMatchesOracle) {
    const auto cfg = config(2, 2, {2, 2, 2}, {2, 2, 2});
    auto w = random_weights(cfg, 32);
    auto f = random_features(2, {2, 2, 2}, 2, 33);
    auto g = random_prior(2, {2, 2, 2}, 34);
    auto r = cross_update_block(f, g, w);
    auto ref = reference::cross_update_same_grid(reference::from_tensor(f.values, 2), reference::from_tensor(g.values, 2),
                                                 w.cub, std::sqrt(2.0));
    expect_near(r.enhanced.values, ref.enhanced, 1e-13);
    expect_near(r.local.values, ref.local, 1e-13);
}

TEST(CrossUpdate, ShapeContractIncludingIndivisibleExtents) {
    for (auto fe : {o::Extents3{2, 4, 4}, o::Extents3{5, 6, 3}}) {
        const auto cfg = config(3, 4, {2, 4, 1}, fe);
        auto w = random_weights(cfg, 35);
        auto f = random_features(4, fe, 2, 36);
        auto g = random_prior(3, {2, 4, 1}, 37);
        auto r = cross_update_block(f, g, w);
        EXPECT_EQ(r.enhanced.values.shape(), f.values.shape());
        EXPECT_EQ(r.local.values.shape(), g.values.shape());
    }
}

TEST(SpmForward, DegenerateWeightTrace) {
    const auto cfg = config(3, 4, {1, 2, 2}, {2, 4, 4});
    auto w = random_weights(cfg, 38);
    for (auto& [name, t] : named_parameters(w, "")) {
        if (name.find("conv") != std::string::npos) continue;
        const bool gamma = name.find("gamma") != std::string::npos;
        std::fill(t.data().begin(), t.data().end(), gamma ? 1.0 : 0.0);
    }
    auto f = random_features(4, {2, 4, 4}, 2, 39);
    auto s = random_prior(3, {1, 2, 2}, 40);
    auto out = spm_forward(f, s, w);
    expect_equal(out.enhanced.values, f.values);
    expect_equal(out.global.values, s.values);
    // S_L comes from F_o alone: pooled 1x1x1 projection.
    auto local = o::pool_to_extents(o::conv3d(f.values, w.cub.conv_w, w.cub.conv_b), {1, 2, 2});
    for (std::size_t i = 0; i < s.values.size(); ++i) EXPECT_EQ(out.prior.values.at(i), s.values.at(i) + local.at(i));
}

TEST(SpmForward, ShapesAndRowStochasticMaps) {
    for (std::uint64_t seed = 41; seed < 51; ++seed) {
        const auto cfg = config(4, 3, {1, 2, 2}, {2, 4, 4});
        auto w = random_weights(cfg, seed);
        auto f = random_features(3, {2, 4, 4}, 2, seed + 100);
        auto s = random_prior(4, {1, 2, 2}, seed + 200);
        auto out = spm_forward(f, s, w);
        EXPECT_EQ(out.enhanced.values.shape(), f.values.shape());
        EXPECT_EQ(out.prior.values.shape(), s.values.shape());
        for (const auto& a : {affinity_self(s, w.sub, cfg.scale), affinity_cross(f, out.global, w)}) {
            for (std::size_t r = 0; r < a.dim(0); ++r) {
                double total = 0;
                for (std::size_t c = 0; c < a.dim(1); ++c) {
                    EXPECT_GE(a.at(r * a.dim(1) + c), 0.0);
                    total += a.at(r * a.dim(1) + c);
                }
                EXPECT_NEAR(total, 1.0, 1e-6);
            }
        }
    }
}

TEST(SpmForward, ThreeChainedStagesKeepClassCount) {
    const std::size_t n = 4;
    const o::Extents3 prior{1, 2, 2};
    std::vector<std::pair<std::size_t, o::Extents3>> stages{{8, {1, 2, 2}}, {4, {1, 4, 4}}, {2, {2, 8, 8}}};
    auto s = random_prior(n, prior, 52);
    std::size_t channels = 8;
    for (auto [k, fe] : stages) {
        auto w = random_weights(config(n, channels, prior, fe, k), 53 + k);
        auto out = spm_forward(random_features(channels, fe, k, 60 + k), s, w);
        EXPECT_EQ(out.prior.classes(), n);
        EXPECT_EQ(out.prior.extents(), prior);
        s = out.prior;
        channels /= 2;
    }
}

TEST(SpmForward, EndToEndGradientCheck) {
    const auto cfg = config(2, 2, {1, 2, 2}, {2, 4, 4});
    for (std::uint64_t seed : {70u, 71u, 72u}) {
        auto w = random_weights(cfg, seed);
        std::vector<Tensord> inputs{random_prior(2, {1, 2, 2}, seed + 1).values,
                                    random_features(2, {2, 4, 4}, 2, seed + 2).values};
        for (auto& t : parameter_values(w)) inputs.push_back(t);
        auto f = [&](const std::vector<Tensord>& in) {
            auto out = spm_forward(FeatureMap<double>{in[1], 2}, ShapePrior<double>{in[0]}, rebind(w, in, 2));
            return o::add(o::sum(out.enhanced.values), o::sum(out.prior.values));
        };
        auto report = grad_check(f, inputs);
        EXPECT_TRUE(report.passed) << "rel error " << report.max_rel_error;
    }
}

TEST(SpmWeights, ParameterCountMatchesTensors) {
    const auto cfg = config(4, 16, {1, 4, 4}, {4, 32, 32});
    std::mt19937_64 rng(1);
    auto w = init_spm_weights<float>(cfg, rng);
    std::size_t total = 0;
    for (const auto& [name, t] : named_parameters(w, "")) {
        total += t.size();
        EXPECT_TRUE(t.requires_grad()) << name;
    }
    EXPECT_EQ(total, parameter_count(cfg));
}

TEST(SpmWeights, AttentionScaleNames) {
    EXPECT_EQ(attention_scale_from_string("sqrt_n"), AttentionScale::kSqrtN);
    EXPECT_EQ(attention_scale_from_string(to_string(AttentionScale::kSqrtDk)), AttentionScale::kSqrtDk);
    EXPECT_THROW(attention_scale_from_string("sqrt_c"), std::invalid_argument);
}
