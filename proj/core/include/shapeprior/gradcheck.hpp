#pragma once

#include <functional>
#include <string>
#include <vector>

#include "shapeprior/tensor.hpp"

namespace shapeprior {

/// Scalar-valued function of several double tensors.
using ScalarFn = std::function<Tensord(const std::vector<Tensord>&)>;

struct GradCheckReport {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t checked = 0;
    bool passed = false;
};

/// Compares reverse-mode gradients of `f` against central differences for
/// every element of every input.
///
/// The per-element error is |analytic - numeric| / max(|analytic|, |numeric|, floor);
/// the floor keeps entries that are zero up to rounding from dominating.
/// Throws NumericError if any evaluation is non-finite.
GradCheckReport grad_check(const ScalarFn& f, std::vector<Tensord> inputs, double h = 1e-5, double tol = 1e-4,
                           double floor = 1e-3);

}  // namespace shapeprior
