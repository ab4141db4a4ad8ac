// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "evl/nn.hpp"

namespace evl::decoder {

struct DecoderConfig {
    std::size_t vocab_size = 18;
    std::size_t model_dim = 32;
    std::size_t num_heads = 2;
    std::size_t num_layers = 2;
    std::size_t mlp_ratio = 4;
    std::size_t caption_context = 16;  // caption input positions, <bos> included
    double init_std = 0.02;

    void validate() const;
};

struct DecoderBlock {
    nn::LayerNorm norm1;
    nn::SelfAttention attention;
    nn::LayerNorm norm2;
    nn::Mlp mlp;
};

// Small pre-norm causal language model that reads an optional prefix of soft
// prompts followed by caption tokens. Learned positions cover caption tokens
// only; prompt rows enter the residual stream as given.
class CausalDecoder {
public:
    CausalDecoder() = default;
    CausalDecoder(const DecoderConfig& config, Rng& rng);

    const DecoderConfig& config() const { return config_; }

    // prompts: [B, P, D] (P may be 0, or the tensor undefined); ids: B rows of
    // equal length T <= caption_context. Returns logits [B, T, V] for the
    // caption positions only.
    Tensor forward(const Tensor& prompts, const std::vector<std::vector<int>>& ids) const;

    void collect(nn::ParameterList& out, const std::string& prefix) const;

    Tensor token_embedding;  // [V, D]
    Tensor position;         // [caption_context, D]
    std::vector<DecoderBlock> blocks;
    nn::LayerNorm final_norm;
    nn::Linear lm_head;

private:
    DecoderConfig config_;
};

}  // namespace evl::decoder
