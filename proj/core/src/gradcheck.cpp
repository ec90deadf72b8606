#include "shapeprior/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace shapeprior {

namespace {
double eval_finite(const ScalarFn& f, const std::vector<Tensord>& inputs) {
    NoGradGuard guard;
    const double v = f(inputs).item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
    return v;
}
}  // namespace

GradCheckReport grad_check(const ScalarFn& f, std::vector<Tensord> inputs, double h, double tol, double floor) {
    std::vector<Tensord> leaves;
    leaves.reserve(inputs.size());
    for (const auto& t : inputs) {
        Tensord leaf = t.detach();
        leaf.set_requires_grad(true);
        leaves.push_back(leaf);
    }
    Tensord out = f(leaves);
    if (!std::isfinite(out.item())) throw NumericError("grad_check: non-finite function value");
    out.backward();

    GradCheckReport report;
    for (auto& leaf : leaves) {
        const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
        for (std::size_t i = 0; i < leaf.size(); ++i) {
            const double orig = leaf.at(i);
            leaf.at(i) = orig + h;
            const double up = eval_finite(f, leaves);
            leaf.at(i) = orig - h;
            const double down = eval_finite(f, leaves);
            leaf.at(i) = orig;
            const double numeric = (up - down) / (2.0 * h);
            if (!std::isfinite(analytic[i])) throw NumericError("grad_check: non-finite analytic gradient");
            const double abs_err = std::abs(analytic[i] - numeric);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
            report.max_abs_error = std::max(report.max_abs_error, abs_err);
            report.max_rel_error = std::max(report.max_rel_error, abs_err / denom);
            ++report.checked;
        }
    }
    report.passed = report.max_rel_error <= tol;
    return report;
}

}  // namespace shapeprior
