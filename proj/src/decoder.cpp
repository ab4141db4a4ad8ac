// SPDX-License-Identifier: Apache-2.0
#include "evl/decoder.hpp"

namespace evl::decoder {

void DecoderConfig::validate() const {
    if (num_heads == 0 || model_dim % num_heads != 0) throw ConfigError("decoder model_dim not divisible by num_heads");
    if (vocab_size < 4) throw ConfigError("decoder vocabulary needs the four special tokens");
    if (caption_context == 0) throw ConfigError("decoder caption_context must be positive");
}

CausalDecoder::CausalDecoder(const DecoderConfig& config, Rng& rng) : config_(config) {
    config_.validate();
    const auto d = config_.model_dim;
    const double sd = config_.init_std;
    token_embedding = nn::init_normal({config_.vocab_size, d}, sd, rng);
    position = nn::init_normal({config_.caption_context, d}, sd, rng);
    for (std::size_t i = 0; i < config_.num_layers; ++i) {
        blocks.push_back({nn::LayerNorm::create(d), nn::SelfAttention::create(d, config_.num_heads, rng, sd),
                          nn::LayerNorm::create(d), nn::Mlp::create(d, d * config_.mlp_ratio, rng, sd)});
    }
    final_norm = nn::LayerNorm::create(d);
    lm_head = nn::Linear::create(d, config_.vocab_size, rng, sd);
}

Tensor CausalDecoder::forward(const Tensor& prompts, const std::vector<std::vector<int>>& ids) const {
    if (ids.empty()) throw DimensionError("decoder: empty batch");
    const std::size_t b = ids.size(), t = ids[0].size(), d = config_.model_dim;
    if (t == 0 || t > config_.caption_context) {
        throw DimensionError("decoder: caption length " + std::to_string(t) + " outside 1.." +
                             std::to_string(config_.caption_context));
    }
    std::vector<int> flat;
    flat.reserve(b * t);
    for (const auto& row : ids) {
        if (row.size() != t) throw DimensionError("decoder: caption rows differ in length");
        flat.insert(flat.end(), row.begin(), row.end());
    }
    const Tensor captions = add(reshape(embedding(token_embedding, flat), {b, t, d}), slice_rows(position, 0, t));

    std::size_t p = 0;
    Tensor x = captions;
    if (prompts.defined() && prompts.numel() > 0) {
        if (prompts.rank() != 3 || prompts.dim(0) != b || prompts.dim(2) != d) {
            throw DimensionError("decoder: prompts must be [" + std::to_string(b) + ", P, " + std::to_string(d) +
                                 "], got " + to_string(prompts.shape()));
        }
        p = prompts.dim(1);
        // concatenate along the sequence axis via the row-major [L, B, D] view
        const std::vector<Tensor> parts{permute(prompts, {1, 0, 2}), permute(captions, {1, 0, 2})};
        x = permute(concat_rows(parts), {1, 0, 2});
    }
    const Tensor mask = nn::causal_mask(p + t);
    nn::AttentionOptions options;
    options.mask = &mask;
    for (const auto& blk : blocks) {
        x = add(x, blk.attention(blk.norm1(x), options).out);
        x = add(x, blk.mlp(blk.norm2(x)));
    }
    if (p > 0) x = permute(slice_rows(permute(x, {1, 0, 2}), p, p + t), {1, 0, 2});
    return lm_head(final_norm(x));
}

void CausalDecoder::collect(nn::ParameterList& out, const std::string& prefix) const {
    out.push_back({prefix + ".token_embedding", token_embedding});
    out.push_back({prefix + ".position", position});
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = prefix + ".blocks." + std::to_string(i);
        blocks[i].norm1.collect(out, p + ".norm1");
        blocks[i].attention.collect(out, p + ".attn");
        blocks[i].norm2.collect(out, p + ".norm2");
        blocks[i].mlp.collect(out, p + ".mlp");
    }
    final_norm.collect(out, prefix + ".final_norm");
    lm_head.collect(out, prefix + ".lm_head");
}

}  // namespace evl::decoder
