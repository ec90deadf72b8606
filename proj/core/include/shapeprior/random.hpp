#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "shapeprior/tensor.hpp"

namespace shapeprior {

/// Normal(0, std) samples redrawn until they fall within two standard deviations.
template <typename T>
Tensor<T> truncated_normal(Shape shape, double std, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) {
        double s = dist(rng);
        while (std::abs(s) > 2.0 * std) s = dist(rng);
        v = static_cast<T>(s);
    }
    return t;
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    return t;
}

}  // namespace shapeprior
