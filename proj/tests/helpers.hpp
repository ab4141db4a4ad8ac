// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <span>
#include <vector>

#include "evl/ops.hpp"
#include "evl/random.hpp"

namespace evl::test {

inline Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng.normal(0.0, stddev);
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

inline std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](double x, double y) {
               return std::memcmp(&x, &y, sizeof x) == 0;
           });
}

}  // namespace evl::test
