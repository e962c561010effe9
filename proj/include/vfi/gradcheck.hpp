#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vfi/tensor.hpp"

namespace vfi {

struct CheckReport {
    std::string name;
    std::size_t coordinates = 0;
    double max_abs_error = 0.0;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Compares reverse-mode gradients of `fn` against central differences
/// (f(x+eps) - f(x-eps)) / 2eps on every coordinate of every input that
/// requires grad; the others are passed through unchanged.
///
/// Non-scalar outputs are contracted with a fixed pseudo-random weight tensor
/// drawn from `projection_seed`. The per-coordinate relative error is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-3 * G) where G is the
/// largest analytic gradient magnitude seen, so coordinates with negligible
/// gradient are judged against the overall gradient scale.
CheckReport finite_diff_check(const TensorFn& fn, const std::vector<Tensor>& inputs, double eps = 1e-4,
                              double tolerance = 1e-4, std::uint64_t projection_seed = 0);

/// Same check on tensors captured by `fn` (e.g. model parameters), perturbed in
/// place and restored afterwards. Their gradients are reset before the check.
CheckReport finite_diff_check_in_place(const std::function<Tensor()>& fn, std::vector<Tensor> parameters,
                                       double eps = 1e-4, double tolerance = 1e-4, std::uint64_t projection_seed = 0);

struct GradcheckSuiteResult {
    std::vector<CheckReport> reports;
    bool all_passed() const;
};

/// The full finite-difference suite over every differentiable building block,
/// each op checked over `seeds` random instances starting at `base_seed`.
GradcheckSuiteResult run_gradcheck_suite(std::uint64_t base_seed, int seeds, double eps, double tolerance,
                                         const std::function<void(const CheckReport&)>& on_report = {});

}  // namespace vfi
