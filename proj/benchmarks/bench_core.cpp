#include <benchmark/benchmark.h>

#include <random>

#include "shapeprior/backbone.hpp"
#include "shapeprior/dataset.hpp"
#include "shapeprior/losses.hpp"
#include "shapeprior/ops.hpp"
#include "shapeprior/shape_prior.hpp"

using namespace shapeprior;

namespace {

Tensorf random_tensor(Shape shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> nd;
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = nd(rng);
    return Tensorf(std::move(shape), std::move(v));
}

// Stage-0 sized 3x3 convolution, channels = range(0), kernel depth = range(1).
void BM_Conv3dForward(benchmark::State& state) {
    const std::size_t c = state.range(0), kd = state.range(1);
    const Tensorf x = random_tensor({c, 8, 64, 64}, 1);
    const Tensorf k = random_tensor({c, c, kd, 3, 3}, 2);
    ops::Conv3dParams p;
    p.padding = {kd / 2, 1, 1};
    NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(ops::conv3d(x, k, Tensorf(), p));
    state.SetItemsProcessed(state.iterations() * 8 * 64 * 64);
}
BENCHMARK(BM_Conv3dForward)->Args({8, 1})->Args({8, 3})->Args({16, 1})->Unit(benchmark::kMillisecond);

void BM_Conv3dForwardBackward(benchmark::State& state) {
    const std::size_t c = state.range(0), kd = state.range(1);
    Tensorf x = random_tensor({c, 8, 64, 64}, 1);
    Tensorf k = random_tensor({c, c, kd, 3, 3}, 2);
    x.set_requires_grad();
    k.set_requires_grad();
    ops::Conv3dParams p;
    p.padding = {kd / 2, 1, 1};
    for (auto _ : state) ops::sum(ops::conv3d(x, k, Tensorf(), p)).backward();
}
BENCHMARK(BM_Conv3dForwardBackward)->Args({8, 1})->Args({8, 3})->Unit(benchmark::kMillisecond);

// SUB cost against the prior volume hwl at N = 4; should grow linearly.
void BM_SelfUpdateScaling(benchmark::State& state) {
    const std::size_t side = state.range(0);
    spm::SpmConfig cfg;
    cfg.classes = 4;
    cfg.channels = 8;
    cfg.prior = {4, side, side};
    cfg.features = {4, side, side};
    std::mt19937_64 rng(3);
    const auto w = spm::init_spm_weights<float>(cfg, rng);
    const spm::ShapePrior<float> s{random_tensor({4, 4, side, side}, 4)};
    NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(spm::self_update_block(s, w.sub, spm::AttentionScale::kSqrtN));
    state.counters["hwl"] = double(4 * side * side);
}
BENCHMARK(BM_SelfUpdateScaling)->Arg(8)->Arg(16)->Arg(32)->Arg(64)->Unit(benchmark::kMicrosecond);

void BM_SpmForward(benchmark::State& state) {
    spm::SpmConfig cfg;
    cfg.classes = 4;
    cfg.channels = 8;
    cfg.stage_factor = 2;
    cfg.prior = {1, 4, 4};
    cfg.features = {8, 32, 32};
    std::mt19937_64 rng(5);
    const auto w = spm::init_spm_weights<float>(cfg, rng);
    const spm::ShapePrior<float> s{random_tensor({4, 1, 4, 4}, 6)};
    const spm::FeatureMap<float> f{random_tensor({8, 8, 32, 32}, 7), 2};
    NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(spm::spm_forward(f, s, w));
}
BENCHMARK(BM_SpmForward)->Unit(benchmark::kMillisecond);

// One forward + backward of the desk-default model on a 8x64x64 case.
void BM_TrainStep(benchmark::State& state) {
    model::ModelConfig cfg;
    cfg.kernel_depth = state.range(0);
    cfg.spm_enabled = state.range(1) != 0;
    auto m = model::build_model<float>(cfg);
    const auto c = data::gen_case(1, cfg.patch, 0.1);
    const Tensorf x({1, 8, 64, 64}, data::zscore(c.volume).voxels);
    for (auto _ : state) {
        harness::total_loss(model::forward(m, x), std::span<const std::uint8_t>(c.mask.labels)).backward();
        for (auto& [name, t] : m.parameters()) t.zero_grad();
    }
}
BENCHMARK(BM_TrainStep)->Args({1, 1})->Args({1, 0})->Args({3, 1})->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
