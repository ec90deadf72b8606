#include "shapeprior/shape_prior.hpp"

#include <cmath>
#include <stdexcept>

#include "shapeprior/random.hpp"

namespace shapeprior::spm {

namespace {

constexpr std::size_t kPriorRatio = 16;

template <typename T>
Tensor<T> project(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    Tensor<T> y = ops::conv3d(x, w, b);
    return ops::reshape(y, {y.dim(0), y.size() / y.dim(0)});
}

template <typename T>
Tensor<T> attention_logits(const Tensor<T>& q, const Tensor<T>& k, std::size_t classes, AttentionScale scale) {
    const double d = scale == AttentionScale::kSqrtN ? static_cast<double>(classes) : static_cast<double>(q.dim(1));
    return ops::scale(ops::matmul(q, ops::transpose(k)), static_cast<T>(1.0 / std::sqrt(d)));
}

template <typename T>
Tensor<T> pointwise_kernel(std::size_t out, std::size_t in, std::mt19937_64& rng) {
    return fan_in_uniform<T>({out, in, 1, 1, 1}, in, rng);
}

template <typename T>
void check_stage(const FeatureMap<T>& features, const ShapePrior<T>& global, const SpmConfig& cfg) {
    if (features.values.ndim() != 4 || features.channels() != cfg.channels || features.extents() != cfg.features) {
        throw ShapeError("spm: feature map " + shape_str(features.values.shape()) + " does not match stage k=" +
                         std::to_string(cfg.stage_factor) + " (expected " + std::to_string(cfg.channels) + " x " +
                         shape_str({cfg.features[0], cfg.features[1], cfg.features[2]}) + ")");
    }
    if (features.stage_factor != cfg.stage_factor) {
        throw ShapeError("spm: feature map from stage k=" + std::to_string(features.stage_factor) +
                         " passed to stage k=" + std::to_string(cfg.stage_factor));
    }
    if (global.classes() != cfg.classes || global.extents() != cfg.prior) {
        throw ShapeError("spm: prior " + shape_str(global.values.shape()) + " does not match the configured N x h x w x l");
    }
}

template <typename T>
Tensor<T> upsample_to(const Tensor<T>& prior, const Extents3& extents) {
    if (ops::spatial_extents(prior) == extents) return prior;
    return ops::resize_trilinear(prior, extents);
}

}  // namespace

std::string to_string(AttentionScale scale) {
    return scale == AttentionScale::kSqrtN ? "sqrt_n" : "sqrt_dk";
}

AttentionScale attention_scale_from_string(const std::string& name) {
    if (name == "sqrt_n") return AttentionScale::kSqrtN;
    if (name == "sqrt_dk") return AttentionScale::kSqrtDk;
    throw std::invalid_argument("unknown attention_scale '" + name + "' (expected sqrt_n or sqrt_dk)");
}

Extents3 prior_extents(const Extents3& patch) {
    Extents3 out{};
    for (int a = 0; a < 3; ++a) {
        if (patch[a] == 0) throw std::invalid_argument("prior_extents: zero patch extent");
        out[a] = std::max<std::size_t>(1, patch[a] / kPriorRatio);
    }
    return out;
}

template <typename T>
ShapePrior<T> init_shape_prior(std::size_t n_classes, const Extents3& patch, std::uint64_t seed) {
    if (n_classes < 2) throw std::invalid_argument("init_shape_prior: need background plus at least one class");
    const Extents3 e = prior_extents(patch);
    std::mt19937_64 rng(seed);
    ShapePrior<T> prior{truncated_normal<T>({n_classes, e[0], e[1], e[2]}, kPriorInitStd, rng)};
    prior.values.set_requires_grad(true);
    return prior;
}

template <typename T>
SpmWeights<T> init_spm_weights(const SpmConfig& config, std::mt19937_64& rng) {
    const std::size_t n = config.classes, c = config.channels;
    const std::size_t m = config.prior[0] * config.prior[1] * config.prior[2];
    const std::size_t hidden = config.mlp_ratio * n;
    SpmWeights<T> w;
    w.config = config;
    auto& s = w.sub;
    s.q_w = pointwise_kernel<T>(n, n, rng);
    s.q_b = Tensor<T>::zeros({n});
    s.k_w = pointwise_kernel<T>(n, n, rng);
    s.k_b = Tensor<T>::zeros({n});
    s.v_w = pointwise_kernel<T>(n, n, rng);
    s.v_b = Tensor<T>::zeros({n});
    s.ln1_gamma = Tensor<T>::ones({m});
    s.ln1_beta = Tensor<T>::zeros({m});
    s.ln2_gamma = Tensor<T>::ones({m});
    s.ln2_beta = Tensor<T>::zeros({m});
    s.mlp.w1 = fan_in_uniform<T>({n, hidden}, n, rng);
    s.mlp.b1 = Tensor<T>::zeros({hidden});
    s.mlp.w2 = fan_in_uniform<T>({hidden, n}, hidden, rng);
    s.mlp.b2 = Tensor<T>::zeros({n});
    auto& x = w.cub;
    x.q_w = pointwise_kernel<T>(c, c, rng);
    x.q_b = Tensor<T>::zeros({c});
    x.k_w = pointwise_kernel<T>(n, n, rng);
    x.k_b = Tensor<T>::zeros({n});
    x.v_w = pointwise_kernel<T>(n, n, rng);
    x.v_b = Tensor<T>::zeros({n});
    x.conv_w = pointwise_kernel<T>(n, c, rng);
    x.conv_b = Tensor<T>::zeros({n});
    for (auto& [name, t] : named_parameters(w, "")) t.set_requires_grad(true);
    return w;
}

template <typename T>
NamedTensors<T> named_parameters(const SpmWeights<T>& w, const std::string& prefix) {
    const auto& s = w.sub;
    const auto& x = w.cub;
    return {
        {prefix + "sub.q_w", s.q_w},         {prefix + "sub.q_b", s.q_b},         {prefix + "sub.k_w", s.k_w},
        {prefix + "sub.k_b", s.k_b},         {prefix + "sub.v_w", s.v_w},         {prefix + "sub.v_b", s.v_b},
        {prefix + "sub.ln1_gamma", s.ln1_gamma}, {prefix + "sub.ln1_beta", s.ln1_beta},
        {prefix + "sub.mlp.w1", s.mlp.w1},   {prefix + "sub.mlp.b1", s.mlp.b1},   {prefix + "sub.mlp.w2", s.mlp.w2},
        {prefix + "sub.mlp.b2", s.mlp.b2},   {prefix + "sub.ln2_gamma", s.ln2_gamma}, {prefix + "sub.ln2_beta", s.ln2_beta},
        {prefix + "cub.q_w", x.q_w},         {prefix + "cub.q_b", x.q_b},         {prefix + "cub.k_w", x.k_w},
        {prefix + "cub.k_b", x.k_b},         {prefix + "cub.v_w", x.v_w},         {prefix + "cub.v_b", x.v_b},
        {prefix + "cub.conv_w", x.conv_w},   {prefix + "cub.conv_b", x.conv_b},
    };
}

std::size_t parameter_count(const SpmConfig& config) {
    const std::size_t n = config.classes, c = config.channels;
    const std::size_t m = config.prior[0] * config.prior[1] * config.prior[2];
    const std::size_t hidden = config.mlp_ratio * n;
    const std::size_t sub = 3 * (n * n + n) + 4 * m + (n * hidden + hidden) + (hidden * n + n);
    const std::size_t cub = (c * c + c) + 2 * (n * n + n) + (n * c + n);
    return sub + cub;
}

template <typename T>
Tensor<T> affinity_self(const ShapePrior<T>& prior, const SelfUpdateWeights<T>& w, AttentionScale scale) {
    const Tensor<T> q = project(prior.values, w.q_w, w.q_b);
    const Tensor<T> k = project(prior.values, w.k_w, w.k_b);
    return ops::softmax(attention_logits(q, k, prior.classes(), scale), 1);
}

template <typename T>
ShapePrior<T> self_update_block(const ShapePrior<T>& prior, const SelfUpdateWeights<T>& w, AttentionScale scale) {
    const std::size_t n = prior.classes(), m = prior.voxels();
    const Tensor<T> affinity = affinity_self(prior, w, scale);
    const Tensor<T> value = project(prior.values, w.v_w, w.v_b);
    const Tensor<T> tokens = ops::reshape(prior.values, {n, m});
    // S' = LN(S_map x V) + S
    const Tensor<T> mixed = ops::add(ops::layer_norm(ops::matmul(affinity, value), w.ln1_gamma, w.ln1_beta), tokens);
    // S_G = LN(MLP(S')) + S'; the MLP acts per voxel across the class axis.
    const Tensor<T> mlp_out = ops::transpose(ops::mlp(ops::transpose(mixed), w.mlp));
    const Tensor<T> global = ops::add(ops::layer_norm(mlp_out, w.ln2_gamma, w.ln2_beta), mixed);
    return {ops::reshape(global, prior.values.shape())};
}

template <typename T>
Tensor<T> affinity_cross(const FeatureMap<T>& features, const ShapePrior<T>& global, const SpmWeights<T>& w) {
    check_stage(features, global, w.config);
    const Tensor<T> up = upsample_to(global.values, features.extents());
    const Tensor<T> q = project(features.values, w.cub.q_w, w.cub.q_b);
    const Tensor<T> k = project(up, w.cub.k_w, w.cub.k_b);
    return ops::softmax(attention_logits(q, k, global.classes(), w.config.scale), 1);
}

template <typename T>
CrossUpdateResult<T> cross_update_block(const FeatureMap<T>& features, const ShapePrior<T>& global,
                                        const SpmWeights<T>& w) {
    const Tensor<T> affinity = affinity_cross(features, global, w);
    const Tensor<T> up = upsample_to(global.values, features.extents());
    const Tensor<T> value = project(up, w.cub.v_w, w.cub.v_b);
    const Tensor<T> mixed = ops::reshape(ops::matmul(affinity, value), features.values.shape());
    const Tensor<T> enhanced = ops::add(mixed, features.values);
    const Tensor<T> local = ops::pool_to_extents(ops::conv3d(enhanced, w.cub.conv_w, w.cub.conv_b), global.extents());
    return {{enhanced, features.stage_factor}, {local}};
}

template <typename T>
SpmOutput<T> spm_forward(const FeatureMap<T>& features, const ShapePrior<T>& prior, const SpmWeights<T>& w) {
    ShapePrior<T> global = self_update_block(prior, w.sub, w.config.scale);
    CrossUpdateResult<T> cross = cross_update_block(features, global, w);
    ShapePrior<T> enhanced_prior{ops::add(cross.local.values, global.values)};
    return {std::move(cross.enhanced), std::move(enhanced_prior), std::move(global), std::move(cross.local)};
}

#define SHAPEPRIOR_INSTANTIATE_SPM(T)                                                                          \
    template ShapePrior<T> init_shape_prior(std::size_t, const Extents3&, std::uint64_t);                      \
    template SpmWeights<T> init_spm_weights(const SpmConfig&, std::mt19937_64&);                               \
    template NamedTensors<T> named_parameters(const SpmWeights<T>&, const std::string&);                       \
    template Tensor<T> affinity_self(const ShapePrior<T>&, const SelfUpdateWeights<T>&, AttentionScale);       \
    template ShapePrior<T> self_update_block(const ShapePrior<T>&, const SelfUpdateWeights<T>&, AttentionScale); \
    template Tensor<T> affinity_cross(const FeatureMap<T>&, const ShapePrior<T>&, const SpmWeights<T>&);       \
    template CrossUpdateResult<T> cross_update_block(const FeatureMap<T>&, const ShapePrior<T>&,               \
                                                     const SpmWeights<T>&);                                    \
    template SpmOutput<T> spm_forward(const FeatureMap<T>&, const ShapePrior<T>&, const SpmWeights<T>&);

SHAPEPRIOR_INSTANTIATE_SPM(float)
SHAPEPRIOR_INSTANTIATE_SPM(double)

}  // namespace shapeprior::spm
