// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <string>

#include "evl/tensor.hpp"

namespace evl {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

struct GradCheckOptions {
    double eps = 1e-5;
    std::size_t max_coords_per_param = 64;
    std::uint64_t seed = 0;
    // Central differences on an O(1) loss resolve about 1e-11 at eps = 1e-5,
    // so gradients below this magnitude are compared against it instead.
    double grad_floor = 1e-6;
};

// Compares reverse-mode gradients of the scalar `f` with central differences
// at sampled coordinates of every tensor in `params`. The error for one
// coordinate is |analytic - numeric| / max(|analytic|, |numeric|, grad_floor).
// `f` must be
// deterministic; params must require grad.
GradCheckResult finite_diff_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                                  const GradCheckOptions& options = {});

}  // namespace evl
