#include "shapeprior/gradient_suite.hpp"

#include <functional>
#include <random>

#include "shapeprior/losses.hpp"
#include "shapeprior/ops.hpp"
#include "shapeprior/shape_prior.hpp"

namespace shapeprior {

namespace {

namespace o = ops;
using spm::FeatureMap;
using spm::ShapePrior;
using spm::SpmWeights;

Tensord random_tensor(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
    std::normal_distribution<double> nd(0.0, sd);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = nd(rng);
    return Tensord(std::move(shape), std::move(v));
}

// <out, r> for a fixed random r of the same shape.
Tensord project(const Tensord& out, std::mt19937_64& rng) {
    return o::sum(o::mul(out, random_tensor(out.shape(), rng)));
}

// Weight set whose tensors are params[offset...], in named_parameters order.
SpmWeights<double> rebind(const SpmWeights<double>& like, const std::vector<Tensord>& params, std::size_t offset) {
    SpmWeights<double> w = like;
    Tensord* slots[] = {&w.sub.q_w,     &w.sub.q_b,     &w.sub.k_w,       &w.sub.k_b,       &w.sub.v_w,  &w.sub.v_b,
                        &w.sub.ln1_gamma, &w.sub.ln1_beta, &w.sub.mlp.w1,  &w.sub.mlp.b1,    &w.sub.mlp.w2, &w.sub.mlp.b2,
                        &w.sub.ln2_gamma, &w.sub.ln2_beta, &w.cub.q_w,     &w.cub.q_b,       &w.cub.k_w,  &w.cub.k_b,
                        &w.cub.v_w,     &w.cub.v_b,     &w.cub.conv_w,    &w.cub.conv_b};
    std::size_t i = offset;
    for (Tensord* s : slots) *s = params.at(i++);
    return w;
}

struct Sizes {
    std::size_t classes, channels;
    o::Extents3 prior, features;
};

// Random SPM weights with perturbed norms and biases so no branch starts at
// an identity.
SpmWeights<double> random_spm(const Sizes& s, std::mt19937_64& rng) {
    spm::SpmConfig cfg;
    cfg.classes = s.classes;
    cfg.channels = s.channels;
    cfg.prior = s.prior;
    cfg.features = s.features;
    cfg.stage_factor = 2;
    auto w = spm::init_spm_weights<double>(cfg, rng);
    std::vector<Tensord> params;
    for (const auto& [name, t] : spm::named_parameters(w, "")) params.push_back(random_tensor(t.shape(), rng, 0.5));
    return rebind(w, params, 0);
}

std::vector<Tensord> spm_params(const SpmWeights<double>& w) {
    std::vector<Tensord> out;
    for (const auto& [name, t] : spm::named_parameters(w, "")) out.push_back(t.detach());
    return out;
}

Shape with_channels(std::size_t c, const o::Extents3& e) { return {c, e[0], e[1], e[2]}; }

using Check = std::function<GradCheckReport(std::mt19937_64&, bool full)>;

GradCheckReport check(const ScalarFn& f, std::vector<Tensord> inputs) {
    for (auto& t : inputs) t.set_requires_grad();
    return grad_check(f, std::move(inputs), 1e-5, 1e-4);
}

const std::vector<std::pair<std::string, Check>>& checks() {
    static const std::vector<std::pair<std::string, Check>> all = {
        {"softmax",
         [](std::mt19937_64& rng, bool full) {
             const std::size_t axis = rng() % 2;
             Tensord r = random_tensor({3, full ? 7u : 4u}, rng);
             return check([&](const std::vector<Tensord>& in) { return o::sum(o::mul(o::softmax(in[0], axis), r)); },
                          {random_tensor({3, full ? 7u : 4u}, rng, 2.0)});
         }},
        {"layer_norm",
         [](std::mt19937_64& rng, bool full) {
             const std::size_t rows = full ? 6 : 3, cols = full ? 8 : 5;
             Tensord r = random_tensor({rows, cols}, rng);
             return check([&](const std::vector<Tensord>& in) { return o::sum(o::mul(o::layer_norm(in[0], in[1], in[2]), r)); },
                          {random_tensor({rows, cols}, rng), random_tensor({cols}, rng), random_tensor({cols}, rng)});
         }},
        {"mlp",
         [](std::mt19937_64& rng, bool full) {
             const std::size_t rows = full ? 6 : 3, f = full ? 4 : 3, h = 4 * f;
             Tensord r = random_tensor({rows, f}, rng);
             return check(
                 [&](const std::vector<Tensord>& in) {
                     return o::sum(o::mul(o::mlp(in[0], o::MlpWeights<double>{in[1], in[2], in[3], in[4]}), r));
                 },
                 {random_tensor({rows, f}, rng), random_tensor({f, h}, rng, 0.5), random_tensor({h}, rng, 0.5),
                  random_tensor({h, f}, rng, 0.5), random_tensor({f}, rng, 0.5)});
         }},
        {"conv3d",
         [](std::mt19937_64& rng, bool full) {
             const std::size_t cin = 2, cout = full ? 4 : 3, e = full ? 6 : 4;
             o::Conv3dParams p;
             p.padding = {1, 1, 1};
             if (rng() % 2) p.stride = {2, 2, 2};
             const Tensord x = random_tensor({cin, e, e, e}, rng);
             const Tensord k = random_tensor({cout, cin, 3, 3, 3}, rng, 0.5);
             const Tensord b = random_tensor({cout}, rng);
             const Tensord probe = o::conv3d(x, k, b, p);
             Tensord r = random_tensor(probe.shape(), rng);
             return check([&](const std::vector<Tensord>& in) { return o::sum(o::mul(o::conv3d(in[0], in[1], in[2], p), r)); },
                          {x, k, b});
         }},
        {"upsample",
         [](std::mt19937_64& rng, bool full) {
             const std::size_t e = full ? 3 : 2;
             Tensord r = random_tensor({2, 2 * e, 2 * e, 2 * e}, rng);
             return check([&](const std::vector<Tensord>& in) { return o::sum(o::mul(o::upsample_trilinear(in[0], 2), r)); },
                          {random_tensor({2, e, e, e}, rng)});
         }},
        {"sub",
         [](std::mt19937_64& rng, bool full) {
             const Sizes s = full ? Sizes{4, 2, {2, 2, 2}, {2, 4, 4}} : Sizes{3, 2, {1, 2, 2}, {2, 4, 4}};
             const auto w = random_spm(s, rng);
             std::vector<Tensord> inputs{random_tensor(with_channels(s.classes, s.prior), rng)};
             for (auto& t : spm_params(w)) inputs.push_back(t);
             Tensord r = random_tensor(with_channels(s.classes, s.prior), rng);
             return check(
                 [&](const std::vector<Tensord>& in) {
                     const auto ws = rebind(w, in, 1);
                     const auto g = spm::self_update_block(ShapePrior<double>{in[0]}, ws.sub, spm::AttentionScale::kSqrtN);
                     return o::sum(o::mul(g.values, r));
                 },
                 inputs);
         }},
        {"cub",
         [](std::mt19937_64& rng, bool full) {
             const Sizes s = full ? Sizes{4, 3, {2, 2, 2}, {2, 4, 4}} : Sizes{3, 2, {1, 2, 2}, {2, 4, 4}};
             const auto w = random_spm(s, rng);
             std::vector<Tensord> inputs{random_tensor(with_channels(s.classes, s.prior), rng),
                                         random_tensor(with_channels(s.channels, s.features), rng)};
             for (auto& t : spm_params(w)) inputs.push_back(t);
             Tensord rf = random_tensor(with_channels(s.channels, s.features), rng);
             Tensord rl = random_tensor(with_channels(s.classes, s.prior), rng);
             return check(
                 [&](const std::vector<Tensord>& in) {
                     const auto out = spm::cross_update_block(FeatureMap<double>{in[1], 2}, ShapePrior<double>{in[0]}, rebind(w, in, 2));
                     return o::add(o::sum(o::mul(out.enhanced.values, rf)), o::sum(o::mul(out.local.values, rl)));
                 },
                 inputs);
         }},
        {"spm_forward",
         [](std::mt19937_64& rng, bool full) {
             const Sizes s = full ? Sizes{4, 3, {2, 2, 2}, {2, 4, 4}} : Sizes{3, 2, {1, 2, 2}, {2, 4, 4}};
             const auto w = random_spm(s, rng);
             std::vector<Tensord> inputs{random_tensor(with_channels(s.classes, s.prior), rng),
                                         random_tensor(with_channels(s.channels, s.features), rng)};
             for (auto& t : spm_params(w)) inputs.push_back(t);
             Tensord rf = random_tensor(with_channels(s.channels, s.features), rng);
             Tensord rp = random_tensor(with_channels(s.classes, s.prior), rng);
             return check(
                 [&](const std::vector<Tensord>& in) {
                     const auto out = spm::spm_forward(FeatureMap<double>{in[1], 2}, ShapePrior<double>{in[0]}, rebind(w, in, 2));
                     return o::add(o::sum(o::mul(out.enhanced.values, rf)), o::sum(o::mul(out.prior.values, rp)));
                 },
                 inputs);
         }},
        {"dice_loss",
         [](std::mt19937_64& rng, bool full) {
             const std::size_t n = full ? 4 : 3, v = full ? 27 : 8;
             std::vector<std::uint8_t> labels(v);
             for (auto& l : labels) l = static_cast<std::uint8_t>(rng() % n);
             return check([&](const std::vector<Tensord>& in) { return harness::dice_loss(in[0], std::span<const std::uint8_t>(labels)); },
                          {random_tensor({n, v}, rng)});
         }},
        {"ce_loss",
         [](std::mt19937_64& rng, bool full) {
             const std::size_t n = full ? 4 : 3, v = full ? 27 : 8;
             std::vector<std::uint8_t> labels(v);
             for (auto& l : labels) l = static_cast<std::uint8_t>(rng() % n);
             return check([&](const std::vector<Tensord>& in) { return harness::ce_loss(in[0], std::span<const std::uint8_t>(labels)); },
                          {random_tensor({n, v}, rng)});
         }},
    };
    return all;
}

}  // namespace

std::vector<std::string> gradient_suite_ops() {
    std::vector<std::string> out;
    for (const auto& [name, fn] : checks()) out.push_back(name);
    return out;
}

std::vector<GradSuiteResult> run_gradient_suite(std::size_t instances, std::uint64_t seed, bool full) {
    std::vector<GradSuiteResult> out;
    for (std::size_t op = 0; op < checks().size(); ++op)
        for (std::size_t i = 0; i < instances; ++i) {
            const std::uint64_t s = seed * 1000003u + op * 101u + i;
            std::mt19937_64 rng(s);
            out.push_back({checks()[op].first, s, checks()[op].second(rng, full)});
        }
    return out;
}

}  // namespace shapeprior
