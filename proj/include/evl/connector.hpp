// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <vector>

#include "evl/nn.hpp"
#include "evl/tokmerge.hpp"

namespace evl::connector {

struct TomeFormerConfig {
    std::size_t num_layers = 12;
    std::size_t model_dim = 64;
    std::size_t num_heads = 4;
    std::size_t mlp_ratio = 4;
    tokmerge::MergeSchedule schedule{19, 12};
    bool include_protected_token = false;
    // Adds log(token size) to attention logits; off unless asked for.
    bool proportional_attention = false;
    tokmerge::PartitionPolicy partition_policy = tokmerge::PartitionPolicy::alternating;
    std::uint64_t partition_seed = 0;
    double init_std = 0.02;
    // > 0 adds a learned per-frame embedding to every projected token, so
    // tokens from concatenated video frames keep their frame index through
    // merging. 0 (the default) adds nothing.
    std::size_t max_frames = 0;

    void validate() const;
};

// Boundary maps: encoder width -> model_dim before the stack, model_dim ->
// decoder width after it. Both stay trainable when encoder and decoder are frozen.
struct ProjectionPair {
    nn::Linear proj_in;
    nn::Linear proj_out;

    static ProjectionPair create(std::size_t encoder_dim, std::size_t model_dim, std::size_t decoder_dim, Rng& rng,
                                 double stddev);
    void collect(nn::ParameterList& out, const std::string& prefix) const;
};

// Pre-norm transformer layer with token merging between attention and MLP.
struct TomeFormerLayer {
    nn::LayerNorm norm1;
    nn::SelfAttention attention;
    nn::LayerNorm norm2;
    nn::Mlp mlp;

    static TomeFormerLayer create(const TomeFormerConfig& config, Rng& rng);

    // `protected_count` leading tokens never merge.
    tokmerge::TokenBatch forward(const tokmerge::TokenBatch& batch, int r, std::size_t protected_count,
                                 const TomeFormerConfig& config) const;
    void collect(nn::ParameterList& out, const std::string& prefix) const;
};

struct TomeFormerOutput {
    Tensor prompts;                  // [L', decoder_dim]
    tokmerge::TokenBatch batch;      // merged tokens in model_dim with provenance
    std::vector<std::size_t> counts;  // token count entering each layer, then the final count
};

class TomeFormer {
public:
    TomeFormer() = default;
    TomeFormer(const TomeFormerConfig& config, std::size_t encoder_dim, std::size_t decoder_dim, Rng& rng);

    const TomeFormerConfig& config() const { return config_; }

    // visual: [L, encoder_dim] patch tokens. With include_protected_token the
    // classification token [1, encoder_dim] must be supplied; it rides at
    // index 0 and never merges. Groups index patches 0..L-1; the protected
    // token's group is {L}. `frames` > 1 means visual holds that many frames
    // of L / frames tokens each, frame-major.
    TomeFormerOutput forward(const Tensor& visual, const std::optional<Tensor>& protected_token = std::nullopt,
                             std::optional<tokmerge::MergeSchedule> schedule = std::nullopt,
                             std::size_t frames = 1) const;

    void collect(nn::ParameterList& out, const std::string& prefix) const;

    ProjectionPair projections;
    std::vector<TomeFormerLayer> layers;
    nn::LayerNorm final_norm;
    Tensor frame_embedding;  // [max_frames, model_dim]; undefined when max_frames == 0

private:
    TomeFormerConfig config_;
};

}  // namespace evl::connector
