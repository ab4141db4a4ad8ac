// SPDX-License-Identifier: Apache-2.0
#include "evl/nn.hpp"

#include <cmath>
#include <limits>

namespace evl::nn {

void set_trainable(const ParameterList& params, bool trainable) {
    for (const auto& p : params) {
        Tensor t = p.value;
        t.set_requires_grad(trainable);
    }
}

Tensor init_normal(Shape shape, double stddev, Rng& rng) {
    std::vector<double> data(numel(shape));
    for (auto& v : data) v = rng.normal(0.0, stddev);
    return Tensor::from(std::move(shape), std::move(data), true);
}

Linear Linear::create(std::size_t in, std::size_t out, Rng& rng, double stddev, bool with_bias) {
    Linear l;
    l.weight = init_normal({in, out}, stddev, rng);
    if (with_bias) l.bias = Tensor::zeros({out}, true);
    return l;
}

void Linear::collect(ParameterList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

LayerNorm LayerNorm::create(std::size_t dim) {
    LayerNorm n;
    n.gain = Tensor::full({dim}, 1.0, true);
    n.bias = Tensor::zeros({dim}, true);
    return n;
}

void LayerNorm::collect(ParameterList& out, const std::string& prefix) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
}

Mlp Mlp::create(std::size_t dim, std::size_t hidden, Rng& rng, double stddev) {
    return {Linear::create(dim, hidden, rng, stddev), Linear::create(hidden, dim, rng, stddev)};
}

void Mlp::collect(ParameterList& out, const std::string& prefix) const {
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
}

SelfAttention SelfAttention::create(std::size_t dim, std::size_t heads, Rng& rng, double stddev) {
    if (heads == 0 || dim % heads != 0) {
        throw ConfigError("model dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
    }
    SelfAttention a;
    a.query = Linear::create(dim, dim, rng, stddev);
    a.key = Linear::create(dim, dim, rng, stddev, false);
    a.value = Linear::create(dim, dim, rng, stddev);
    a.proj = Linear::create(dim, dim, rng, stddev);
    a.heads = heads;
    return a;
}

namespace {

// [G, L, D] -> [G*H, L, D/H]
Tensor split_heads(const Tensor& x, std::size_t heads) {
    const std::size_t g = x.dim(0), l = x.dim(1), d = x.dim(2);
    return reshape(permute(reshape(x, {g, l, heads, d / heads}), {0, 2, 1, 3}), {g * heads, l, d / heads});
}

Tensor merge_heads(const Tensor& x, std::size_t groups, std::size_t heads) {
    const std::size_t l = x.dim(1), dh = x.dim(2);
    return reshape(permute(reshape(x, {groups, heads, l, dh}), {0, 2, 1, 3}), {groups, l, heads * dh});
}

}  // namespace

AttentionOutput SelfAttention::operator()(const Tensor& x, const AttentionOptions& options) const {
    if (x.rank() != 3) throw DimensionError("attention expects [G, L, D], got " + to_string(x.shape()));
    const std::size_t groups = x.dim(0);
    const Tensor q = split_heads(query(x), heads);
    const Tensor k = split_heads(key(x), heads);
    const Tensor v = split_heads(value(x), heads);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.dim(2)));
    Tensor scores = scale(matmul(q, transpose_last(k)), inv_sqrt);
    if (options.key_bias) scores = add(scores, *options.key_bias);
    if (options.mask) scores = add(scores, *options.mask);
    const Tensor attended = matmul(softmax(scores, -1), v);
    AttentionOutput out{proj(merge_heads(attended, groups, heads)), {}};
    if (options.keep_keys) out.keys = k;
    return out;
}

void SelfAttention::collect(ParameterList& out, const std::string& prefix) const {
    query.collect(out, prefix + ".query");
    key.collect(out, prefix + ".key");
    value.collect(out, prefix + ".value");
    proj.collect(out, prefix + ".proj");
}

Tensor causal_mask(std::size_t len) {
    std::vector<double> m(len * len, 0.0);
    for (std::size_t i = 0; i < len; ++i)
        for (std::size_t j = i + 1; j < len; ++j) m[i * len + j] = -std::numeric_limits<double>::infinity();
    return Tensor::from({len, len}, std::move(m));
}

}  // namespace evl::nn
