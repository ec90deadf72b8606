#include "shapeprior/losses.hpp"

#include <algorithm>
#include <cmath>

#include "shapeprior/ops.hpp"

namespace shapeprior::harness {

namespace {

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

struct Layout {
    std::size_t classes, voxels;
};

template <typename T>
Layout check(const Tensor<T>& logits, std::span<const std::uint8_t> labels, const char* op) {
    if (logits.ndim() < 2) throw ShapeError(std::string(op) + ": logits must be N x spatial, got " + shape_str(logits.shape()));
    const Layout l{logits.dim(0), logits.size() / logits.dim(0)};
    if (labels.size() != l.voxels)
        throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " + std::to_string(l.voxels) +
                         " voxels");
    for (auto v : labels)
        if (v >= l.classes)
            throw ShapeError(std::string(op) + ": label " + std::to_string(v) + " out of range for " +
                             std::to_string(l.classes) + " classes");
    return l;
}

// Softmax over the class axis of an N x V buffer.
template <typename T>
Buffer<T> class_softmax(std::span<const T> z, const Layout& l) {
    Buffer<T> p(z.size());
    for (std::size_t v = 0; v < l.voxels; ++v) {
        T mx = z[v];
        for (std::size_t c = 1; c < l.classes; ++c) mx = std::max(mx, z[c * l.voxels + v]);
        T total = T(0);
        for (std::size_t c = 0; c < l.classes; ++c) total += (p[c * l.voxels + v] = std::exp(z[c * l.voxels + v] - mx));
        for (std::size_t c = 0; c < l.classes; ++c) p[c * l.voxels + v] /= total;
    }
    return p;
}

}  // namespace

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& logits, std::span<const std::uint8_t> labels) {
    const Layout l = check(logits, labels, "dice_loss");
    if (l.classes < 2) throw ShapeError("dice_loss: need at least one foreground class");
    Buffer<T> p = class_softmax<T>(logits.data(), l);
    const std::vector<std::uint8_t> g(labels.begin(), labels.end());
    Buffer<T> inter(l.classes, T(0)), psum(l.classes, T(0)), gsum(l.classes, T(0));
    for (std::size_t c = 1; c < l.classes; ++c)
        for (std::size_t v = 0; v < l.voxels; ++v) {
            const T pv = p[c * l.voxels + v];
            psum[c] += pv;
            if (g[v] == c) {
                inter[c] += pv;
                gsum[c] += T(1);
            }
        }
    const T eps = T(kDiceSmooth);
    const T fg = T(l.classes - 1);
    T dice_mean = T(0);
    for (std::size_t c = 1; c < l.classes; ++c) dice_mean += (T(2) * inter[c] + eps) / (psum[c] + gsum[c] + eps);
    dice_mean /= fg;

    NodePtr<T> xn = logits.node_ptr();
    return make_result<T>(
        {1}, {T(1) - dice_mean}, {logits},
        [xn, l, p = std::move(p), g, inter, psum, gsum, eps, fg](TensorNode<T>& self) {
            const T up = self.grad[0];
            auto out = xn->grad_buffer();
            Buffer<T> dp(l.classes);
            for (std::size_t v = 0; v < l.voxels; ++v) {
                T dot = T(0);
                dp[0] = T(0);
                for (std::size_t c = 1; c < l.classes; ++c) {
                    const T den = psum[c] + gsum[c] + eps;
                    const T num = T(2) * inter[c] + eps;
                    dp[c] = -up / fg * ((g[v] == c ? T(2) : T(0)) * den - num) / (den * den);
                    dot += p[c * l.voxels + v] * dp[c];
                }
                for (std::size_t c = 0; c < l.classes; ++c) {
                    const std::size_t i = c * l.voxels + v;
                    out[i] += p[i] * (dp[c] - dot);
                }
            }
        },
        "dice_loss");
}

template <typename T>
Tensor<T> ce_loss(const Tensor<T>& logits, std::span<const std::uint8_t> labels) {
    const Layout l = check(logits, labels, "ce_loss");
    Buffer<T> p = class_softmax<T>(logits.data(), l);
    const auto z = logits.data();
    T total = T(0);
    for (std::size_t v = 0; v < l.voxels; ++v) {
        T mx = z[v];
        for (std::size_t c = 1; c < l.classes; ++c) mx = std::max(mx, z[c * l.voxels + v]);
        T s = T(0);
        for (std::size_t c = 0; c < l.classes; ++c) s += std::exp(z[c * l.voxels + v] - mx);
        total += mx + std::log(s) - z[labels[v] * l.voxels + v];
    }
    const std::vector<std::uint8_t> g(labels.begin(), labels.end());
    NodePtr<T> xn = logits.node_ptr();
    return make_result<T>(
        {1}, {total / T(l.voxels)}, {logits},
        [xn, l, p = std::move(p), g](TensorNode<T>& self) {
            const T scale = self.grad[0] / T(l.voxels);
            auto out = xn->grad_buffer();
            for (std::size_t c = 0; c < l.classes; ++c)
                for (std::size_t v = 0; v < l.voxels; ++v) {
                    const std::size_t i = c * l.voxels + v;
                    out[i] += scale * (p[i] - (g[v] == c ? T(1) : T(0)));
                }
        },
        "ce_loss");
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& logits, std::span<const std::uint8_t> labels) {
    return ops::add(dice_loss(logits, labels), ce_loss(logits, labels));
}

#define SHAPEPRIOR_INSTANTIATE_LOSSES(T)                                                   \
    template Tensor<T> dice_loss(const Tensor<T>&, std::span<const std::uint8_t>);         \
    template Tensor<T> ce_loss(const Tensor<T>&, std::span<const std::uint8_t>);           \
    template Tensor<T> total_loss(const Tensor<T>&, std::span<const std::uint8_t>);

SHAPEPRIOR_INSTANTIATE_LOSSES(float)
SHAPEPRIOR_INSTANTIATE_LOSSES(double)

}  // namespace shapeprior::harness
