#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "shapeprior/volume.hpp"

// Classical comparison paradigms: atlas label propagation under integer
// translations, and per-voxel intensity Gaussian mixtures fitted by EM.
namespace shapeprior::baselines {

using data::Extents3;
using data::MaskVolume;
using data::Volume;

using Offset3 = std::array<int, 3>;

struct Registration {
    Offset3 translation{0, 0, 0};  // target(p) ~ source(p - t)
    double score = 0.0;            // negative mean squared difference over the overlap
};

/// Exhaustive search over t in [-radius, radius]^3 (axes of extent 1 stay
/// at 0). Cost is the mean squared difference over the voxels where both
/// images are defined, so partial overlaps are not rewarded for covering
/// fewer voxels. Ties go to the smallest |t|_1, then lexicographically
/// smallest t. Throws std::invalid_argument for radius < 0 or unequal extents.
Registration register_translation(const Volume& source, const Volume& target, int radius);

struct AtlasPair {
    Volume image;
    MaskVolume mask;
};

struct AtlasResult {
    MaskVolume mask;
    std::vector<double> weights;             // omega_i, sums to 1
    std::vector<Registration> registrations;
};

/// Weighted label fusion: omega = softmax(-MSD_i / temperature), and every
/// voxel takes the class with the largest omega-weighted vote of the
/// translated base masks. Temperature 0 is the hard limit: uniform weight
/// over the best-matching bases. Voxels that a translation moves out of
/// frame vote background. Vote ties go to the lower class id.
/// Throws std::invalid_argument for an empty base set, mismatched extents
/// or a negative temperature.
AtlasResult atlas_segment(const Volume& test, std::span<const AtlasPair> bases, int radius, double temperature);

constexpr double kVarianceFloor = 1e-6;

struct GaussianMixture {
    std::vector<double> means;       // ascending
    std::vector<double> variances;   // >= kVarianceFloor
    std::vector<double> weights;     // mixing weights, sum to 1
    std::vector<double> log_likelihood;  // per EM iteration, total over samples
    std::size_t iterations = 0;
    bool degenerate = false;  // fewer distinct intensities than components

    std::size_t components() const { return means.size(); }
};

/// 1-D EM. Means start at the (k + 0.5) / n sample quantiles with a small
/// seeded jitter, variances at the sample variance, weights uniform. Stops
/// once the log-likelihood gain drops below `tol` or after `max_iter`.
/// Components are returned sorted by mean. Throws std::invalid_argument for
/// n = 0 or no samples.
GaussianMixture gmm_fit_em(std::span<const float> pixels, std::size_t n, std::uint64_t init_seed,
                           std::size_t max_iter = 200, double tol = 1e-8);

/// Per-voxel argmax of pi_i N(x; mu_i, sigma_i^2); ties go to the lower index.
MaskVolume gmm_segment(const Volume& test, const GaussianMixture& mixture);

/// Maps mixture components to class ids by rank: the component with the
/// k-th smallest mean takes the class with the k-th smallest reference mean.
/// `class_means` must have one entry per component.
std::vector<std::uint8_t> rank_component_labels(const GaussianMixture& mixture, std::span<const double> class_means);

}  // namespace shapeprior::baselines
