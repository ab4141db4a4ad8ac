// SPDX-License-Identifier: Apache-2.0
#include "evl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "evl/random.hpp"

namespace evl {

GradCheckResult finite_diff_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                                  const GradCheckOptions& options) {
    for (auto& p : params) {
        if (!p.requires_grad()) throw ContractError("finite_diff_check: parameter does not require grad");
        p.zero_grad();
    }
    backward(f());

    Rng rng(options.seed);
    GradCheckResult result;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        const std::vector<double> analytic = p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                                          : std::vector<double>(p.numel(), 0.0);
        std::vector<std::size_t> coords(p.numel());
        std::iota(coords.begin(), coords.end(), 0);
        if (coords.size() > options.max_coords_per_param) {
            // partial Fisher-Yates: first k entries become a uniform sample
            for (std::size_t i = 0; i < options.max_coords_per_param; ++i) {
                std::swap(coords[i], coords[i + rng.index(coords.size() - i)]);
            }
            coords.resize(options.max_coords_per_param);
            std::sort(coords.begin(), coords.end());
        }
        for (auto c : coords) {
            auto data = p.mutable_data();
            const double original = data[c];
            double plus, minus;
            {
                NoGradGuard guard;
                data[c] = original + options.eps;
                plus = f().item();
                data[c] = original - options.eps;
                minus = f().item();
            }
            data[c] = original;
            const double numeric = (plus - minus) / (2.0 * options.eps);
            const double err = std::abs(analytic[c] - numeric) /
                               std::max({std::abs(analytic[c]), std::abs(numeric), options.grad_floor});
            ++result.coordinates;
            if (err > result.max_rel_error || result.coordinates == 1) {
                result.max_rel_error = err;
                result.worst_param = pi;
                result.worst_index = c;
                result.worst_analytic = analytic[c];
                result.worst_numeric = numeric;
            }
        }
    }
    return result;
}

}  // namespace evl
