#include "shapeprior/optim.hpp"

#include <cmath>
#include <numbers>

namespace shapeprior::harness {

AdamW::AdamW(const spm::NamedTensors<float>& params, AdamWOptions options) : opt_(options) {
    for (const auto& [name, t] : params) {
        const bool decay = t.ndim() >= 2 && name != "spm.prior";
        slots_.push_back({t, std::vector<float>(t.size(), 0.0f), std::vector<float>(t.size(), 0.0f), decay});
    }
}

void AdamW::zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
}

void AdamW::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, double(t_));
    const float b1 = float(opt_.beta1), b2 = float(opt_.beta2);
    for (auto& s : slots_) {
        if (!s.param.has_grad()) continue;
        auto w = s.param.data();
        const auto g = s.param.grad();
        const float shrink = s.decay ? float(1.0 - lr * opt_.weight_decay) : 1.0f;
        for (std::size_t i = 0; i < w.size(); ++i) {
            s.m[i] = b1 * s.m[i] + (1.0f - b1) * g[i];
            s.v[i] = b2 * s.v[i] + (1.0f - b2) * g[i] * g[i];
            const double mhat = s.m[i] / bc1, vhat = s.v[i] / bc2;
            w[i] = float(double(w[i] * shrink) - lr * mhat / (std::sqrt(vhat) + opt_.eps));
        }
    }
}

double warmup_cosine(double base_lr, std::size_t step, std::size_t warmup, std::size_t total) {
    if (step < warmup) return base_lr * double(step + 1) / double(warmup);
    if (total <= warmup) return base_lr;
    const double progress = double(step - warmup) / double(total - warmup);
    return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

}  // namespace shapeprior::harness
