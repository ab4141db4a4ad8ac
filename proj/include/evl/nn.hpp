// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "evl/ops.hpp"
#include "evl/random.hpp"
#include "evl/tensor.hpp"

namespace evl::nn {

struct Parameter {
    std::string name;
    Tensor value;
};
using ParameterList = std::vector<Parameter>;

void set_trainable(const ParameterList& params, bool trainable);

// Weights ~ N(0, std), biases zero.
Tensor init_normal(Shape shape, double stddev, Rng& rng);

struct Linear {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out], undefined when the map has no bias

    static Linear create(std::size_t in, std::size_t out, Rng& rng, double stddev, bool with_bias = true);
    Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
    void collect(ParameterList& out, const std::string& prefix) const;
};

struct LayerNorm {
    Tensor gain;
    Tensor bias;
    double eps = kLayerNormEps;

    static LayerNorm create(std::size_t dim);
    Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }
    void collect(ParameterList& out, const std::string& prefix) const;
};

struct Mlp {
    Linear fc1;
    Linear fc2;

    static Mlp create(std::size_t dim, std::size_t hidden, Rng& rng, double stddev);
    Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }
    void collect(ParameterList& out, const std::string& prefix) const;
};

struct AttentionOptions {
    const Tensor* mask = nullptr;      // additive, broadcast onto [G*H, L, L]
    const Tensor* key_bias = nullptr;  // additive per key, shape [L]
    bool keep_keys = false;
};

struct AttentionOutput {
    Tensor out;   // [G, L, D]
    Tensor keys;  // [G*H, L, D/H], only with keep_keys
};

// Multi-head self-attention over a [G, L, D] batch. The key projection has no
// bias: a key bias shifts every logit in a row equally and cancels in softmax.
struct SelfAttention {
    Linear query, key, value, proj;
    std::size_t heads = 1;

    static SelfAttention create(std::size_t dim, std::size_t heads, Rng& rng, double stddev);
    AttentionOutput operator()(const Tensor& x, const AttentionOptions& options = {}) const;
    void collect(ParameterList& out, const std::string& prefix) const;
};

// Additive causal mask [len, len]: 0 on and below the diagonal, -inf above.
Tensor causal_mask(std::size_t len);

}  // namespace evl::nn
