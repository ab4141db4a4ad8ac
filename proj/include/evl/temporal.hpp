// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <vector>

#include "evl/nn.hpp"
#include "evl/tokmerge.hpp"

namespace evl::temporal {

// Video activations [B, N, L, D]: batch, frames, tokens per frame, hidden.
struct FrameBatch {
    Tensor activations;
    double frame_rate = 0.0;  // informational only

    std::size_t batch() const { return activations.dim(0); }
    std::size_t frames() const { return activations.dim(1); }
    std::size_t tokens() const { return activations.dim(2); }
    std::size_t dim() const { return activations.dim(3); }

    // [(B*N), L, D]: one sequence per frame.
    Tensor spatial_view() const;
    // [(B*L), N, D]: one sequence per token position across frames.
    Tensor temporal_view() const;
    static FrameBatch from_spatial(const Tensor& view, std::size_t batch, std::size_t frames);
    static FrameBatch from_temporal(const Tensor& view, std::size_t batch, std::size_t tokens);
};

struct TemporalOptions {
    bool logit_scaling = false;        // divide logits by sqrt(D)
    bool position_encoding = false;    // learned per-frame embedding added to the query/key input
    std::size_t max_frames = 8;
};

// Per token position, attention across frames with a residual:
//   k = W_key v',  q = W_query v',  v'' = v' + softmax(q k^T) v'
struct TemporalModule {
    nn::Linear query;
    nn::Linear key;  // no bias: it would cancel in the softmax over frames
    Tensor frame_embedding;  // [max_frames, D], only with position_encoding
    TemporalOptions options;

    static TemporalModule create(std::size_t dim, const TemporalOptions& options, Rng& rng, double stddev);
    void collect(nn::ParameterList& out, const std::string& prefix) const;
};

FrameBatch temporal_contextualize(const FrameBatch& v, const TemporalModule& module);

struct EncoderConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 4;
    std::size_t channels = 3;
    std::size_t model_dim = 32;
    std::size_t num_heads = 2;
    std::size_t num_layers = 2;
    std::size_t mlp_ratio = 4;
    bool use_cls = true;
    double init_std = 0.02;
    // Blocks that get a temporal module after their self-attention.
    std::vector<std::size_t> temporal_blocks;
    TemporalOptions temporal;

    std::size_t patches_per_frame() const;
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
    void validate() const;
};

struct EncoderBlock {
    nn::LayerNorm norm1;
    nn::SelfAttention attention;
    nn::LayerNorm norm2;
    nn::Mlp mlp;
    std::optional<TemporalModule> temporal;
};

// Self-attention per frame through the [(B*N), L, D] view, residual included.
FrameBatch spatial_attend(const FrameBatch& v, const EncoderBlock& block);

// Intermediate activations of one block, for inspection and tests.
struct BlockTrace {
    Tensor after_attention;  // v'
    Tensor after_temporal;   // v'' (equals v' when the block has no temporal module)
    Tensor post_norm;        // input of the MLP
    Tensor output;
};

// Frozen-prefix cache: activations right after the spatial attention of the
// first block that owns a temporal module (or the whole stack when none does).
struct EncoderState {
    FrameBatch activations;
    std::size_t block = 0;
    bool attention_done = false;
};

struct EncodedVideo {
    Tensor patch_tokens;  // [N*L, D], frame-major
    Tensor cls;           // [N, D], undefined without a classification token
};

class VisionEncoder {
public:
    VisionEncoder() = default;
    VisionEncoder(const EncoderConfig& config, Rng& rng);

    const EncoderConfig& config() const { return config_; }
    std::size_t tokens_per_frame() const { return config_.patches_per_frame() + (config_.use_cls ? 1 : 0); }

    // [B, N, H, W, C] -> [B, N, L, patch_dim], patches in raster order.
    Tensor patchify(const Tensor& pixels) const;
    FrameBatch embed(const Tensor& pixels) const;

    // Full stack plus final norm. use_temporal = false is the image path.
    FrameBatch forward(const Tensor& pixels, bool use_temporal = true, std::vector<BlockTrace>* trace = nullptr) const;

    EncoderState frozen_prefix(const Tensor& pixels, bool use_temporal = true) const;
    FrameBatch resume(const EncoderState& state, bool use_temporal = true) const;

    // Per-sample token split of a [B, N, T, D] encoder output.
    EncodedVideo split(const FrameBatch& out, std::size_t sample) const;

    void collect(nn::ParameterList& out, const std::string& prefix) const;
    void collect_temporal(nn::ParameterList& out, const std::string& prefix) const;

    nn::Linear patch_embed;
    Tensor cls_token;  // [1, D]
    Tensor position;   // [T, D], starts as a 2-D sine-cosine table
    std::vector<EncoderBlock> blocks;
    nn::LayerNorm final_norm;

private:
    FrameBatch run_block(const FrameBatch& x, const EncoderBlock& block, bool use_temporal, bool skip_attention,
                         BlockTrace* trace) const;

    EncoderConfig config_;
};

// Patch tokens of each sample, frames concatenated along the sequence axis
// ([N*L] tokens, frame-major) with fresh provenance; classification tokens dropped.
std::vector<tokmerge::TokenBatch> encode_video(const Tensor& pixels, const VisionEncoder& encoder);

enum class CheckStatus { pass, fail, skipped };

struct PropertyCheck {
    std::string name;
    CheckStatus status = CheckStatus::pass;
    double max_diff = 0.0;
    double tolerance = 0.0;
};

// Static-frame and permutation laws on random frames, checked at every block
// that owns a temporal module. The permutation law is skipped when frame
// positions are encoded.
std::vector<PropertyCheck> check_properties(const VisionEncoder& encoder, std::uint64_t seed);
const char* status_name(CheckStatus status);

}  // namespace evl::temporal
