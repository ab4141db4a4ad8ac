// SPDX-License-Identifier: Apache-2.0
#include "evl/temporal.hpp"

#include <algorithm>
#include <cmath>

namespace evl::temporal {

Tensor FrameBatch::spatial_view() const { return reshape(activations, {batch() * frames(), tokens(), dim()}); }

Tensor FrameBatch::temporal_view() const {
    return reshape(permute(activations, {0, 2, 1, 3}), {batch() * tokens(), frames(), dim()});
}

FrameBatch FrameBatch::from_spatial(const Tensor& view, std::size_t batch, std::size_t frames) {
    return {reshape(view, {batch, frames, view.dim(1), view.dim(2)})};
}

FrameBatch FrameBatch::from_temporal(const Tensor& view, std::size_t batch, std::size_t tokens) {
    return {permute(reshape(view, {batch, tokens, view.dim(1), view.dim(2)}), {0, 2, 1, 3})};
}

TemporalModule TemporalModule::create(std::size_t dim, const TemporalOptions& options, Rng& rng, double stddev) {
    TemporalModule m;
    m.query = nn::Linear::create(dim, dim, rng, stddev);
    m.key = nn::Linear::create(dim, dim, rng, stddev, false);
    m.options = options;
    if (options.position_encoding) m.frame_embedding = nn::init_normal({options.max_frames, dim}, stddev, rng);
    return m;
}

void TemporalModule::collect(nn::ParameterList& out, const std::string& prefix) const {
    query.collect(out, prefix + ".query");
    key.collect(out, prefix + ".key");
    if (frame_embedding.defined()) out.push_back({prefix + ".frame_embedding", frame_embedding});
}

FrameBatch temporal_contextualize(const FrameBatch& v, const TemporalModule& module) {
    const std::size_t b = v.batch(), n = v.frames(), l = v.tokens(), d = v.dim();
    const Tensor x = v.temporal_view();  // [(B*L), N, D]
    Tensor qk_input = x;
    if (module.options.position_encoding) {
        if (n > module.options.max_frames) {
            throw DimensionError("temporal position encoding covers " + std::to_string(module.options.max_frames) +
                                 " frames, got " + std::to_string(n));
        }
        // frame order reaches the logits only; values and residual stay v'
        qk_input = add(x, slice_rows(module.frame_embedding, 0, n));
    }
    Tensor logits = matmul(module.query(qk_input), transpose_last(module.key(qk_input)));
    if (module.options.logit_scaling) logits = scale(logits, 1.0 / std::sqrt(static_cast<double>(d)));
    const Tensor mixed = add(x, matmul(softmax(logits, -1), x));
    return FrameBatch::from_temporal(mixed, b, l);
}

std::size_t EncoderConfig::patches_per_frame() const {
    const std::size_t side = image_size / patch_size;
    return side * side;
}

void EncoderConfig::validate() const {
    if (patch_size == 0 || image_size % patch_size != 0) {
        throw ConfigError("image size " + std::to_string(image_size) + " not divisible by patch size " +
                          std::to_string(patch_size));
    }
    if (num_heads == 0 || model_dim % num_heads != 0) throw ConfigError("encoder model_dim not divisible by num_heads");
    if (model_dim % 4 != 0) throw ConfigError("encoder model_dim must be a multiple of 4 for 2-D position encoding");
    for (auto b : temporal_blocks) {
        if (b >= num_layers) throw ConfigError("temporal block index " + std::to_string(b) + " out of range");
    }
}

FrameBatch spatial_attend(const FrameBatch& v, const EncoderBlock& block) {
    const Tensor xs = v.spatial_view();
    const auto attn = block.attention(block.norm1(xs));
    return FrameBatch::from_spatial(add(xs, attn.out), v.batch(), v.frames());
}

namespace {

// Fixed 2-D sine-cosine table: the first half of the width encodes the patch
// row, the second half the column; the classification row stays zero.
Tensor sincos_positions(const EncoderConfig& c) {
    const std::size_t d = c.model_dim, grid = c.image_size / c.patch_size, quarter = d / 4;
    const std::size_t offset = c.use_cls ? 1 : 0;
    std::vector<double> table((offset + grid * grid) * d, 0.0);
    for (std::size_t i = 0; i < grid * grid; ++i) {
        double* row = &table[(offset + i) * d];
        const double coord[2] = {static_cast<double>(i / grid), static_cast<double>(i % grid)};
        for (std::size_t axis = 0; axis < 2; ++axis)
            for (std::size_t k = 0; k < quarter; ++k) {
                const double omega = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(quarter));
                row[axis * 2 * quarter + k] = std::sin(coord[axis] * omega);
                row[axis * 2 * quarter + quarter + k] = std::cos(coord[axis] * omega);
            }
    }
    return Tensor::from({offset + grid * grid, d}, std::move(table));
}

}  // namespace

VisionEncoder::VisionEncoder(const EncoderConfig& config, Rng& rng) : config_(config) {
    config_.validate();
    const auto d = config_.model_dim;
    const double sd = config_.init_std;
    patch_embed = nn::Linear::create(config_.patch_dim(), d, rng, sd);
    if (config_.use_cls) cls_token = nn::init_normal({1, d}, sd, rng);
    position = sincos_positions(config_);
    for (std::size_t i = 0; i < config_.num_layers; ++i) {
        EncoderBlock blk{nn::LayerNorm::create(d), nn::SelfAttention::create(d, config_.num_heads, rng, sd),
                         nn::LayerNorm::create(d), nn::Mlp::create(d, d * config_.mlp_ratio, rng, sd), std::nullopt};
        blocks.push_back(std::move(blk));
    }
    final_norm = nn::LayerNorm::create(d);
    // temporal modules draw last so adding them leaves backbone init unchanged
    for (auto b : config_.temporal_blocks) {
        blocks[b].temporal = TemporalModule::create(d, config_.temporal, rng, sd);
    }
}

Tensor VisionEncoder::patchify(const Tensor& pixels) const {
    if (pixels.rank() != 5) throw DimensionError("pixels must be [B, N, H, W, C], got " + to_string(pixels.shape()));
    const std::size_t b = pixels.dim(0), n = pixels.dim(1), h = pixels.dim(2), w = pixels.dim(3), c = pixels.dim(4);
    const std::size_t p = config_.patch_size;
    if (h % p != 0 || w % p != 0) {
        throw ConfigError("frame " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by patch size " +
                          std::to_string(p));
    }
    if (h != config_.image_size || w != config_.image_size || c != config_.channels) {
        throw DimensionError("encoder expects " + std::to_string(config_.image_size) + "x" +
                             std::to_string(config_.image_size) + "x" + std::to_string(config_.channels) +
                             " frames, got " + to_string(pixels.shape()));
    }
    const std::size_t gh = h / p, gw = w / p, pd = p * p * c;
    std::vector<double> out(b * n * gh * gw * pd);
    const auto src = pixels.data();
    for (std::size_t f = 0; f < b * n; ++f)
        for (std::size_t py = 0; py < gh; ++py)
            for (std::size_t px = 0; px < gw; ++px)
                for (std::size_t y = 0; y < p; ++y)
                    for (std::size_t x = 0; x < p; ++x)
                        for (std::size_t ch = 0; ch < c; ++ch) {
                            const std::size_t dst = ((f * gh * gw + py * gw + px) * pd) + (y * p + x) * c + ch;
                            out[dst] = src[((f * h + py * p + y) * w + px * p + x) * c + ch];
                        }
    return Tensor::from({b, n, gh * gw, pd}, std::move(out));
}

FrameBatch VisionEncoder::embed(const Tensor& pixels) const {
    const Tensor patches = patchify(pixels);
    const std::size_t b = patches.dim(0), n = patches.dim(1), l = patches.dim(2), d = config_.model_dim;
    Tensor tokens = reshape(patch_embed(patches), {b * n, l, d});
    if (config_.use_cls) {
        const Tensor cls_rows = add(Tensor::zeros({1, b * n, d}), reshape(cls_token, {d}));
        const std::vector<Tensor> parts{cls_rows, permute(tokens, {1, 0, 2})};
        tokens = permute(concat_rows(parts), {1, 0, 2});
    }
    tokens = add(tokens, position);
    return FrameBatch::from_spatial(tokens, b, n);
}

FrameBatch VisionEncoder::run_block(const FrameBatch& x, const EncoderBlock& block, bool use_temporal,
                                    bool skip_attention, BlockTrace* trace) const {
    FrameBatch v = skip_attention ? x : spatial_attend(x, block);
    if (trace) trace->after_attention = v.activations;
    if (use_temporal && block.temporal) v = temporal_contextualize(v, *block.temporal);
    if (trace) trace->after_temporal = v.activations;
    const Tensor normed = block.norm2(v.activations);
    if (trace) trace->post_norm = normed;
    FrameBatch out{add(v.activations, block.mlp(normed)), x.frame_rate};
    if (trace) trace->output = out.activations;
    return out;
}

FrameBatch VisionEncoder::forward(const Tensor& pixels, bool use_temporal, std::vector<BlockTrace>* trace) const {
    FrameBatch x = embed(pixels);
    if (trace) trace->assign(blocks.size(), {});
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        x = run_block(x, blocks[i], use_temporal, false, trace ? &(*trace)[i] : nullptr);
    }
    return {final_norm(x.activations), x.frame_rate};
}

EncoderState VisionEncoder::frozen_prefix(const Tensor& pixels, bool use_temporal) const {
    NoGradGuard guard;
    EncoderState state{embed(pixels), 0, false};
    for (; state.block < blocks.size(); ++state.block) {
        const auto& blk = blocks[state.block];
        if (use_temporal && blk.temporal) {
            state.activations = spatial_attend(state.activations, blk);
            state.attention_done = true;
            return state;
        }
        state.activations = run_block(state.activations, blk, use_temporal, false, nullptr);
    }
    return state;
}

FrameBatch VisionEncoder::resume(const EncoderState& state, bool use_temporal) const {
    FrameBatch x = state.activations;
    for (std::size_t i = state.block; i < blocks.size(); ++i) {
        x = run_block(x, blocks[i], use_temporal, i == state.block && state.attention_done, nullptr);
    }
    return {final_norm(x.activations), x.frame_rate};
}

EncodedVideo VisionEncoder::split(const FrameBatch& out, std::size_t sample) const {
    const std::size_t n = out.frames(), t = out.tokens(), d = out.dim();
    const std::size_t first_patch = config_.use_cls ? 1 : 0;
    const Tensor rows = reshape(out.activations, {out.batch() * n * t, d});
    std::vector<std::vector<RowTerm>> patch_terms, cls_terms;
    for (std::size_t f = 0; f < n; ++f) {
        const std::size_t base = (sample * n + f) * t;
        if (config_.use_cls) cls_terms.push_back({{base, 1.0}});
        for (std::size_t i = first_patch; i < t; ++i) patch_terms.push_back({{base + i, 1.0}});
    }
    EncodedVideo enc{combine_rows(rows, patch_terms), {}};
    if (config_.use_cls) enc.cls = combine_rows(rows, cls_terms);
    return enc;
}

void VisionEncoder::collect(nn::ParameterList& out, const std::string& prefix) const {
    patch_embed.collect(out, prefix + ".patch_embed");
    if (cls_token.defined()) out.push_back({prefix + ".cls_token", cls_token});
    out.push_back({prefix + ".position", position});
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = prefix + ".blocks." + std::to_string(i);
        blocks[i].norm1.collect(out, p + ".norm1");
        blocks[i].attention.collect(out, p + ".attn");
        blocks[i].norm2.collect(out, p + ".norm2");
        blocks[i].mlp.collect(out, p + ".mlp");
    }
    final_norm.collect(out, prefix + ".final_norm");
}

void VisionEncoder::collect_temporal(nn::ParameterList& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        if (blocks[i].temporal) blocks[i].temporal->collect(out, prefix + "." + std::to_string(i));
    }
}

std::vector<tokmerge::TokenBatch> encode_video(const Tensor& pixels, const VisionEncoder& encoder) {
    const FrameBatch out = encoder.forward(pixels, true);
    std::vector<tokmerge::TokenBatch> batches;
    for (std::size_t s = 0; s < out.batch(); ++s) batches.push_back(tokmerge::TokenBatch::fresh(encoder.split(out, s).patch_tokens));
    return batches;
}

namespace {

Tensor random_frames(const EncoderConfig& c, std::size_t frames, Rng& rng) {
    std::vector<double> data(frames * c.image_size * c.image_size * c.channels);
    for (auto& v : data) v = rng.uniform();
    return Tensor::from({1, frames, c.image_size, c.image_size, c.channels}, std::move(data));
}

Tensor repeat_frame(const Tensor& frame, std::size_t frames) {
    std::vector<double> data;
    for (std::size_t f = 0; f < frames; ++f) data.insert(data.end(), frame.data().begin(), frame.data().end());
    Shape shape = frame.shape();
    shape[1] = frames;
    return Tensor::from(std::move(shape), std::move(data));
}

double max_abs_diff(std::span<const double> a, std::span<const double> b, double scale_b = 1.0) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - scale_b * b[i]));
    return worst;
}

PropertyCheck finish(std::string name, double diff, double tol) {
    return {std::move(name), diff <= tol ? CheckStatus::pass : CheckStatus::fail, diff, tol};
}

}  // namespace

const char* status_name(CheckStatus status) {
    switch (status) {
        case CheckStatus::pass: return "pass";
        case CheckStatus::fail: return "fail";
        case CheckStatus::skipped: return "skipped";
    }
    return "?";
}

std::vector<PropertyCheck> check_properties(const VisionEncoder& encoder, std::uint64_t seed) {
    NoGradGuard no_grad;
    const auto& c = encoder.config();
    Rng rng(seed);
    std::vector<std::size_t> temporal_blocks;
    for (std::size_t i = 0; i < encoder.blocks.size(); ++i) {
        if (encoder.blocks[i].temporal) temporal_blocks.push_back(i);
    }
    if (temporal_blocks.empty()) throw ConfigError("encoder has no temporal module to check");
    std::vector<PropertyCheck> checks;

    const Tensor one = random_frames(c, 1, rng);
    std::vector<BlockTrace> video, image;
    encoder.forward(one, true, &video);
    encoder.forward(one, false, &image);
    double doubling = 0.0;
    for (auto b : temporal_blocks) {
        doubling = std::max(doubling, max_abs_diff(video[b].after_temporal.data(), video[b].after_attention.data(), 2.0));
    }
    checks.push_back(finish("single_frame_doubling", doubling, 1e-10));

    const std::size_t static_frames = std::min<std::size_t>(4, c.temporal.max_frames);
    std::vector<BlockTrace> repeated;
    encoder.forward(repeat_frame(one, static_frames), true, &repeated);
    double static_diff = 0.0;
    for (auto b : temporal_blocks) {
        static_diff = std::max(static_diff,
                               max_abs_diff(repeated[b].after_temporal.data(), repeated[b].after_attention.data(), 2.0));
    }
    checks.push_back(finish("identical_frames_doubling", static_diff, 1e-10));

    const std::size_t first = temporal_blocks.front();
    checks.push_back(finish("post_norm_matches_image_path",
                            max_abs_diff(video[first].post_norm.data(), image[first].post_norm.data()), 1e-9));

    if (c.temporal.position_encoding) {
        checks.push_back({"frame_permutation_equivariance", CheckStatus::skipped, 0.0, 1e-10});
    } else {
        const std::size_t n = 3;
        const Tensor frames = random_frames(c, n, rng);
        const std::vector<std::size_t> perm{2, 0, 1};
        const std::size_t frame_size = frames.numel() / n;
        std::vector<double> permuted;
        for (auto f : perm) {
            permuted.insert(permuted.end(), frames.data().begin() + static_cast<long>(f * frame_size),
                            frames.data().begin() + static_cast<long>((f + 1) * frame_size));
        }
        const FrameBatch base = encoder.forward(frames, true);
        const FrameBatch moved = encoder.forward(Tensor::from(frames.shape(), std::move(permuted)), true);
        const std::size_t out_frame = base.activations.numel() / n;
        double diff = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            diff = std::max(diff, max_abs_diff(moved.activations.data().subspan(i * out_frame, out_frame),
                                               base.activations.data().subspan(perm[i] * out_frame, out_frame)));
        }
        checks.push_back(finish("frame_permutation_equivariance", diff, 1e-10));
    }
    return checks;
}

}  // namespace evl::temporal
