#include "shapeprior/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>

namespace shapeprior::baselines {

namespace {

struct Candidate {
    Offset3 t;
    double msd;
};

int l1(const Offset3& t) { return std::abs(t[0]) + std::abs(t[1]) + std::abs(t[2]); }

bool better(const Candidate& a, const Candidate& b) {
    if (a.msd != b.msd) return a.msd < b.msd;
    if (l1(a.t) != l1(b.t)) return l1(a.t) < l1(b.t);
    return a.t < b.t;
}

// Mean squared difference of target(p) and source(p - t) over the overlap;
// infinity when the overlap is empty.
double shifted_msd(const Volume& source, const Volume& target, const Offset3& t) {
    const auto& e = target.extents;
    std::array<std::size_t, 3> lo{}, hi{};
    for (int a = 0; a < 3; ++a) {
        const long n = static_cast<long>(e[a]);
        lo[a] = static_cast<std::size_t>(std::clamp<long>(t[a], 0, n));
        hi[a] = static_cast<std::size_t>(std::clamp<long>(n + t[a], 0, n));
        if (lo[a] >= hi[a]) return std::numeric_limits<double>::infinity();
    }
    double acc = 0.0;
    for (std::size_t z = lo[0]; z < hi[0]; ++z)
        for (std::size_t y = lo[1]; y < hi[1]; ++y) {
            const float* tr = &target.voxels[target.index(z, y, lo[2])];
            const float* sr = &source.voxels[source.index(z - t[0], y - t[1], lo[2] - t[2])];
            for (std::size_t x = 0; x < hi[2] - lo[2]; ++x) {
                const double d = double(tr[x]) - double(sr[x]);
                acc += d * d;
            }
        }
    return acc / static_cast<double>((hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2]));
}

double log_normal(double x, double mean, double var) {
    const double d = x - mean;
    return -0.5 * (std::log(2.0 * std::numbers::pi * var) + d * d / var);
}

}  // namespace

Registration register_translation(const Volume& source, const Volume& target, int radius) {
    if (radius < 0) throw std::invalid_argument("register_translation: negative radius");
    if (source.extents != target.extents) throw std::invalid_argument("register_translation: extents differ");
    std::array<int, 3> r{};
    for (int a = 0; a < 3; ++a) r[a] = target.extents[a] == 1 ? 0 : radius;
    Candidate best{{0, 0, 0}, std::numeric_limits<double>::infinity()};
    for (int dz = -r[0]; dz <= r[0]; ++dz)
        for (int dy = -r[1]; dy <= r[1]; ++dy)
            for (int dx = -r[2]; dx <= r[2]; ++dx) {
                const Candidate c{{dz, dy, dx}, shifted_msd(source, target, {dz, dy, dx})};
                if (better(c, best)) best = c;
            }
    return {best.t, -best.msd};
}

AtlasResult atlas_segment(const Volume& test, std::span<const AtlasPair> bases, int radius, double temperature) {
    if (bases.empty()) throw std::invalid_argument("atlas_segment: empty base set");
    if (temperature < 0.0) throw std::invalid_argument("atlas_segment: negative temperature");
    std::size_t classes = 2;
    for (const auto& b : bases) {
        if (b.image.extents != test.extents || b.mask.extents != test.extents)
            throw std::invalid_argument("atlas_segment: base extents differ from the test volume");
        for (auto l : b.mask.labels) classes = std::max<std::size_t>(classes, std::size_t(l) + 1);
    }

    AtlasResult out;
    std::vector<double> cost;
    for (const auto& b : bases) {
        out.registrations.push_back(register_translation(b.image, test, radius));
        cost.push_back(-out.registrations.back().score);
    }
    const double best = *std::min_element(cost.begin(), cost.end());
    out.weights.resize(bases.size());
    for (std::size_t i = 0; i < bases.size(); ++i) {
        if (temperature == 0.0) {
            out.weights[i] = cost[i] == best ? 1.0 : 0.0;
        } else {
            out.weights[i] = std::exp(-(cost[i] - best) / temperature);
        }
    }
    const double total = std::accumulate(out.weights.begin(), out.weights.end(), 0.0);
    for (auto& w : out.weights) w /= total;

    const auto& e = test.extents;
    out.mask = MaskVolume(e, test.spacing);
    std::vector<double> votes(classes);
    for (std::size_t z = 0; z < e[0]; ++z)
        for (std::size_t y = 0; y < e[1]; ++y)
            for (std::size_t x = 0; x < e[2]; ++x) {
                std::fill(votes.begin(), votes.end(), 0.0);
                for (std::size_t i = 0; i < bases.size(); ++i) {
                    if (out.weights[i] == 0.0) continue;
                    const Offset3& t = out.registrations[i].translation;
                    const long sz = long(z) - t[0], sy = long(y) - t[1], sx = long(x) - t[2];
                    const bool inside = sz >= 0 && sy >= 0 && sx >= 0 && sz < long(e[0]) && sy < long(e[1]) && sx < long(e[2]);
                    votes[inside ? bases[i].mask.at(sz, sy, sx) : 0] += out.weights[i];
                }
                out.mask.at(z, y, x) = static_cast<std::uint8_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
            }
    return out;
}

GaussianMixture gmm_fit_em(std::span<const float> pixels, std::size_t n, std::uint64_t init_seed, std::size_t max_iter,
                           double tol) {
    if (n == 0) throw std::invalid_argument("gmm_fit_em: need at least one component");
    if (pixels.empty()) throw std::invalid_argument("gmm_fit_em: no samples");
    const std::size_t count = pixels.size();
    std::vector<double> x(pixels.begin(), pixels.end());
    std::vector<double> sorted = x;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t distinct = static_cast<std::size_t>(std::unique(sorted.begin(), sorted.end()) - sorted.begin());
    sorted.assign(x.begin(), x.end());
    std::sort(sorted.begin(), sorted.end());

    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / double(count);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var = std::max(var / double(count), kVarianceFloor);

    GaussianMixture g;
    g.degenerate = distinct < n;
    std::mt19937_64 rng(init_seed);
    std::uniform_real_distribution<double> jitter(-0.01, 0.01);
    for (std::size_t k = 0; k < n; ++k) {
        const double q = (double(k) + 0.5) / double(n) * double(count - 1);
        const std::size_t i = static_cast<std::size_t>(q);
        const double frac = q - double(i);
        const double quantile = sorted[i] + (i + 1 < count ? frac * (sorted[i + 1] - sorted[i]) : 0.0);
        g.means.push_back(quantile + (g.degenerate ? 0.0 : jitter(rng) * std::sqrt(var)));
        g.variances.push_back(var);
        g.weights.push_back(1.0 / double(n));
    }
    if (g.degenerate) {
        // Not enough distinct values to separate the components.
        std::fill(g.means.begin(), g.means.end(), mean);
        std::fill(g.variances.begin(), g.variances.end(), var);
        return g;
    }

    std::vector<double> resp(count * n), logp(n);
    for (std::size_t it = 0; it < max_iter; ++it) {
        // E-step, in the log domain.
        double ll = 0.0;
        for (std::size_t s = 0; s < count; ++s) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < n; ++k) {
                logp[k] = std::log(g.weights[k]) + log_normal(x[s], g.means[k], g.variances[k]);
                mx = std::max(mx, logp[k]);
            }
            double total = 0.0;
            for (std::size_t k = 0; k < n; ++k) total += std::exp(logp[k] - mx);
            const double lse = mx + std::log(total);
            ll += lse;
            for (std::size_t k = 0; k < n; ++k) resp[s * n + k] = std::exp(logp[k] - lse);
        }
        const bool converged = !g.log_likelihood.empty() && ll - g.log_likelihood.back() < tol;
        g.log_likelihood.push_back(ll);
        g.iterations = it + 1;
        if (converged) break;

        // M-step.
        for (std::size_t k = 0; k < n; ++k) {
            double nk = 0.0, sx = 0.0;
            for (std::size_t s = 0; s < count; ++s) {
                nk += resp[s * n + k];
                sx += resp[s * n + k] * x[s];
            }
            if (nk <= 0.0) continue;  // empty component keeps its parameters
            const double mu = sx / nk;
            double sv = 0.0;
            for (std::size_t s = 0; s < count; ++s) sv += resp[s * n + k] * (x[s] - mu) * (x[s] - mu);
            g.means[k] = mu;
            g.variances[k] = std::max(sv / nk, kVarianceFloor);
            g.weights[k] = nk / double(count);
        }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return g.means[a] < g.means[b]; });
    GaussianMixture s = g;
    for (std::size_t k = 0; k < n; ++k) {
        s.means[k] = g.means[order[k]];
        s.variances[k] = g.variances[order[k]];
        s.weights[k] = g.weights[order[k]];
    }
    return s;
}

MaskVolume gmm_segment(const Volume& test, const GaussianMixture& g) {
    MaskVolume out(test.extents, test.spacing);
    for (std::size_t i = 0; i < test.voxels.size(); ++i) {
        std::size_t best = 0;
        double best_lp = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < g.components(); ++k) {
            const double lp = std::log(g.weights[k]) + log_normal(test.voxels[i], g.means[k], g.variances[k]);
            if (lp > best_lp) {
                best_lp = lp;
                best = k;
            }
        }
        out.labels[i] = static_cast<std::uint8_t>(best);
    }
    return out;
}

std::vector<std::uint8_t> rank_component_labels(const GaussianMixture& g, std::span<const double> class_means) {
    if (class_means.size() != g.components())
        throw std::invalid_argument("rank_component_labels: need one reference mean per component");
    std::vector<std::size_t> comp(g.components()), cls(g.components());
    std::iota(comp.begin(), comp.end(), 0);
    std::iota(cls.begin(), cls.end(), 0);
    std::stable_sort(comp.begin(), comp.end(), [&](auto a, auto b) { return g.means[a] < g.means[b]; });
    std::stable_sort(cls.begin(), cls.end(), [&](auto a, auto b) { return class_means[a] < class_means[b]; });
    std::vector<std::uint8_t> labels(g.components());
    for (std::size_t r = 0; r < comp.size(); ++r) labels[comp[r]] = static_cast<std::uint8_t>(cls[r]);
    return labels;
}

}  // namespace shapeprior::baselines
