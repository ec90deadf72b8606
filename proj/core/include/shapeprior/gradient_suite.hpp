#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "shapeprior/gradcheck.hpp"

namespace shapeprior {

struct GradSuiteResult {
    std::string op;
    std::uint64_t seed = 0;
    GradCheckReport report;
};

/// Names of the checked ops, in run order.
std::vector<std::string> gradient_suite_ops();

/// Finite-difference checks in double precision (h = 1e-5, tolerance 1e-4)
/// of every differentiable building block, on `instances` random problems
/// each. Outputs are reduced through a fixed random projection so that
/// sum-preserving ops such as softmax still get a nonzero gradient.
/// `full` uses larger problems.
std::vector<GradSuiteResult> run_gradient_suite(std::size_t instances = 3, std::uint64_t seed = 1, bool full = false);

}  // namespace shapeprior
