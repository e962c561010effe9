#include "vfi/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "vfi/ops.hpp"

namespace vfi {

namespace {

Tensor project(const Tensor& out, std::uint64_t seed)
{
    if (out.numel() == 1) return out;
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    std::vector<double> r(out.numel());
    for (double& v : r) v = dist(rng);
    return sum(mul(out, Tensor::from(out.shape(), std::move(r))));
}

}  // namespace

namespace {

CheckReport check_leaves(const std::function<Tensor()>& fn, std::vector<Tensor>& leaves, double eps, double tolerance,
                         std::uint64_t projection_seed)
{
    CheckReport report;
    report.tolerance = tolerance;

    for (Tensor& leaf : leaves)
        if (leaf.requires_grad()) leaf.zero_grad();
    Tensor loss = project(fn(), projection_seed);
    loss.backward();

    auto evaluate = [&]() {
        NoGradGuard guard;
        return project(fn(), projection_seed).item();
    };

    std::vector<double> analytic, numeric;
    for (Tensor& leaf : leaves) {
        if (!leaf.requires_grad()) continue;
        std::vector<double> g(leaf.numel(), 0.0);
        if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), g.begin());
        auto values = leaf.mutable_values();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double original = values[i];
            values[i] = original + eps;
            const double plus = evaluate();
            values[i] = original - eps;
            const double minus = evaluate();
            values[i] = original;
            analytic.push_back(g[i]);
            numeric.push_back((plus - minus) / (2.0 * eps));
        }
    }

    double scale = 0.0;
    for (double a : analytic) scale = std::max(scale, std::abs(a));
    const double floor = std::max(1e-3 * scale, 1e-12);
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double diff = std::abs(analytic[i] - numeric[i]);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
        report.max_abs_error = std::max(report.max_abs_error, diff);
        report.max_rel_error = std::max(report.max_rel_error, diff / denom);
    }
    report.coordinates = analytic.size();
    report.passed = std::isfinite(report.max_rel_error) && report.max_rel_error < tolerance;
    return report;
}

}  // namespace

CheckReport finite_diff_check(const TensorFn& fn, const std::vector<Tensor>& inputs, double eps, double tolerance,
                              std::uint64_t projection_seed)
{
    std::vector<Tensor> leaves;
    leaves.reserve(inputs.size());
    for (const Tensor& t : inputs) {
        Tensor leaf = t.detach();
        leaf.set_requires_grad(t.requires_grad());
        leaves.push_back(leaf);
    }
    return check_leaves([&] { return fn(leaves); }, leaves, eps, tolerance, projection_seed);
}

CheckReport finite_diff_check_in_place(const std::function<Tensor()>& fn, std::vector<Tensor> parameters, double eps,
                                       double tolerance, std::uint64_t projection_seed)
{
    return check_leaves(fn, parameters, eps, tolerance, projection_seed);
}

bool GradcheckSuiteResult::all_passed() const
{
    return !reports.empty() &&
           std::all_of(reports.begin(), reports.end(), [](const CheckReport& r) { return r.passed; });
}

}  // namespace vfi
