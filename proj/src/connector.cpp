// SPDX-License-Identifier: Apache-2.0
#include "evl/connector.hpp"

#include <cmath>
#include <numeric>

namespace evl::connector {

void TomeFormerConfig::validate() const {
    if (num_heads == 0 || model_dim % num_heads != 0) {
        throw ConfigError("connector model_dim " + std::to_string(model_dim) + " not divisible by num_heads " +
                          std::to_string(num_heads));
    }
    if (schedule.num_layers != num_layers) {
        throw ConfigError("merge schedule covers " + std::to_string(schedule.num_layers) + " layers, connector has " +
                          std::to_string(num_layers));
    }
    if (schedule.r < 0) throw ConfigError("merge quota r must be non-negative");
}

ProjectionPair ProjectionPair::create(std::size_t encoder_dim, std::size_t model_dim, std::size_t decoder_dim, Rng& rng,
                                      double stddev) {
    return {nn::Linear::create(encoder_dim, model_dim, rng, stddev),
            nn::Linear::create(model_dim, decoder_dim, rng, stddev)};
}

void ProjectionPair::collect(nn::ParameterList& out, const std::string& prefix) const {
    proj_in.collect(out, prefix + ".proj_in");
    proj_out.collect(out, prefix + ".proj_out");
}

TomeFormerLayer TomeFormerLayer::create(const TomeFormerConfig& config, Rng& rng) {
    const auto d = config.model_dim;
    return {nn::LayerNorm::create(d), nn::SelfAttention::create(d, config.num_heads, rng, config.init_std),
            nn::LayerNorm::create(d), nn::Mlp::create(d, d * config.mlp_ratio, rng, config.init_std)};
}

tokmerge::TokenBatch TomeFormerLayer::forward(const tokmerge::TokenBatch& batch, int r, std::size_t protected_count,
                                              const TomeFormerConfig& config) const {
    const Tensor& x = batch.tokens;
    if (x.rank() != 2 || x.dim(1) != config.model_dim) {
        throw DimensionError("TomeFormer layer expects [L, " + std::to_string(config.model_dim) + "], got " +
                             to_string(x.shape()));
    }
    const std::size_t len = x.dim(0);

    Tensor size_bias;
    nn::AttentionOptions options;
    options.keep_keys = true;
    if (config.proportional_attention) {
        std::vector<double> logs(len);
        for (std::size_t i = 0; i < len; ++i) logs[i] = std::log(static_cast<double>(batch.sizes[i]));
        size_bias = Tensor::from({len}, std::move(logs));
        options.key_bias = &size_bias;
    }
    const auto attn = attention(reshape(norm1(x), {1, len, config.model_dim}), options);

    tokmerge::TokenBatch attended = batch;
    attended.tokens = add(x, reshape(attn.out, {len, config.model_dim}));

    std::vector<std::size_t> protected_tokens(protected_count);
    std::iota(protected_tokens.begin(), protected_tokens.end(), 0);
    const tokmerge::MatchOptions match{config.partition_policy, config.partition_seed};
    const auto plan = tokmerge::bipartite_soft_match(attn.keys.detach(), r, protected_tokens, match);
    tokmerge::TokenBatch merged = tokmerge::apply_merge(attended, plan);

    merged.tokens = add(merged.tokens, mlp(norm2(merged.tokens)));
    return merged;
}

void TomeFormerLayer::collect(nn::ParameterList& out, const std::string& prefix) const {
    norm1.collect(out, prefix + ".norm1");
    attention.collect(out, prefix + ".attn");
    norm2.collect(out, prefix + ".norm2");
    mlp.collect(out, prefix + ".mlp");
}

TomeFormer::TomeFormer(const TomeFormerConfig& config, std::size_t encoder_dim, std::size_t decoder_dim, Rng& rng)
    : config_(config) {
    config_.validate();
    projections = ProjectionPair::create(encoder_dim, config.model_dim, decoder_dim, rng, config.init_std);
    for (std::size_t l = 0; l < config.num_layers; ++l) layers.push_back(TomeFormerLayer::create(config_, rng));
    final_norm = nn::LayerNorm::create(config.model_dim);
    if (config.max_frames > 0) frame_embedding = nn::init_normal({config.max_frames, config.model_dim}, config.init_std, rng);
}

TomeFormerOutput TomeFormer::forward(const Tensor& visual, const std::optional<Tensor>& protected_token,
                                     std::optional<tokmerge::MergeSchedule> schedule, std::size_t frames) const {
    const auto sched = schedule.value_or(config_.schedule);
    if (sched.num_layers != layers.size()) throw ConfigError("merge schedule length does not match layer count");
    if (visual.rank() != 2 || visual.dim(1) != projections.proj_in.weight.dim(0)) {
        throw DimensionError("TomeFormer expects visual tokens [L, " + std::to_string(projections.proj_in.weight.dim(0)) +
                             "], got " + to_string(visual.shape()));
    }
    const std::size_t patches = visual.dim(0);
    if (frames == 0 || patches % frames != 0) {
        throw DimensionError(std::to_string(patches) + " visual tokens do not split into " + std::to_string(frames) +
                             " frames");
    }

    Tensor input = visual;
    std::size_t protected_count = 0;
    if (config_.include_protected_token) {
        if (!protected_token) throw ContractError("include_protected_token is set but no protected token was given");
        const std::vector<Tensor> parts{*protected_token, visual};
        input = concat_rows(parts);
        protected_count = 1;
    }

    Tensor projected = projections.proj_in(input);
    if (frame_embedding.defined()) {
        if (frames > config_.max_frames) {
            throw DimensionError(std::to_string(frames) + " frames exceed connector max_frames " +
                                 std::to_string(config_.max_frames));
        }
        std::vector<int> frame_of(patches);
        for (std::size_t i = 0; i < patches; ++i) frame_of[i] = static_cast<int>(i / (patches / frames));
        Tensor rows = embedding(frame_embedding, frame_of);
        if (protected_count) {
            const std::vector<Tensor> parts{Tensor::zeros({1, config_.model_dim}), rows};
            rows = concat_rows(parts);
        }
        projected = add(projected, rows);
    }
    tokmerge::TokenBatch batch = tokmerge::TokenBatch::fresh(projected);
    if (protected_count) {
        // patches keep indices 0..L-1; the protected token is recorded as index L
        batch.groups[0] = {patches};
        for (std::size_t i = 1; i < batch.count(); ++i) batch.groups[i] = {i - 1};
    }

    TomeFormerOutput out;
    for (const auto& layer : layers) {
        out.counts.push_back(batch.count() - protected_count);
        batch = layer.forward(batch, sched.r, protected_count, config_);
    }
    out.counts.push_back(batch.count() - protected_count);
    out.prompts = projections.proj_out(final_norm(batch.tokens));
    out.batch = std::move(batch);
    return out;
}

void TomeFormer::collect(nn::ParameterList& out, const std::string& prefix) const {
    projections.collect(out, prefix);
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].collect(out, prefix + ".layers." + std::to_string(l));
    final_norm.collect(out, prefix + ".final_norm");
    if (frame_embedding.defined()) out.push_back({prefix + ".frame_embedding", frame_embedding});
}

}  // namespace evl::connector
