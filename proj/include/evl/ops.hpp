// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "evl/tensor.hpp"

namespace evl {

// The scale-invariance error of layer_norm is about eps / variance. Freshly
// initialized rows (a CLS token drawn at std 0.02) have variance near 1e-4,
// so eps stays far below that to keep layer_norm(a*x) == layer_norm(x) at 1e-10.
inline constexpr double kLayerNormEps = 1e-15;

// Elementwise ops. `b` may broadcast when its shape is a trailing suffix of a's.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// [..., m, k] x [..., k, n]. Batch extents must match, or one side is a plain
// matrix broadcast across the other's batch.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose_last(const Tensor& a);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm);
Tensor reshape(const Tensor& a, Shape shape);

Tensor softmax(const Tensor& x, int axis = -1);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps);
Tensor gelu(const Tensor& x);

// x [..., in] * weight [in, out] + bias [out]; pass an undefined bias to skip it.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Mean negative log-likelihood over positions whose target != ignore_id.
// All-ignored input yields 0 with zero gradient.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_id);
Tensor mse_loss(const Tensor& prediction, const Tensor& target);

Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);

struct RowTerm {
    std::size_t row;
    double weight;
};
// out[j] = sum over terms[j] of weight * x[row]; x is [rows, d].
Tensor combine_rows(const Tensor& x, const std::vector<std::vector<RowTerm>>& terms);

}  // namespace evl
