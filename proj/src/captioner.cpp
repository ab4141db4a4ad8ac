// SPDX-License-Identifier: Apache-2.0
#include "evl/captioner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace evl::captioner {

using datagen::Vocabulary;

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

void ModelConfig::validate() const {
    encoder.validate();
    connector.validate();
    decoder.validate();
    if (!(video_r_multiplier > 0.0)) throw ConfigError("video_r_multiplier must be positive");
    if (decoder.vocab_size != Vocabulary::grammar().size()) {
        throw ConfigError("decoder vocab_size " + std::to_string(decoder.vocab_size) + " does not match the " +
                          std::to_string(Vocabulary::grammar().size()) + "-word caption vocabulary");
    }
}

CaptionModel::CaptionModel(const ModelConfig& config) : config_(config), vocab_(Vocabulary::grammar()) {
    config_.validate();
    Rng encoder_rng(derive_seed(config_.seed, 1));
    Rng connector_rng(derive_seed(config_.seed, 2));
    Rng decoder_rng(derive_seed(config_.seed, 3));
    encoder = temporal::VisionEncoder(config_.encoder, encoder_rng);
    connector = connector::TomeFormer(config_.connector, config_.encoder.model_dim, config_.decoder.model_dim,
                                      connector_rng);
    decoder = decoder::CausalDecoder(config_.decoder, decoder_rng);
}

nn::ParameterList CaptionModel::encoder_parameters() const {
    nn::ParameterList out;
    encoder.collect(out, "encoder");
    return out;
}

nn::ParameterList CaptionModel::temporal_parameters() const {
    nn::ParameterList out;
    encoder.collect_temporal(out, "temporal");
    return out;
}

nn::ParameterList CaptionModel::connector_parameters() const {
    nn::ParameterList out;
    connector.collect(out, "connector");
    return out;
}

nn::ParameterList CaptionModel::decoder_parameters() const {
    nn::ParameterList out;
    decoder.collect(out, "decoder");
    return out;
}

nn::ParameterList CaptionModel::trainable_parameters() const {
    auto out = connector_parameters();
    for (auto& p : temporal_parameters()) out.push_back(std::move(p));
    return out;
}

nn::ParameterList CaptionModel::frozen_parameters() const {
    auto out = encoder_parameters();
    for (auto& p : decoder_parameters()) out.push_back(std::move(p));
    return out;
}

nn::ParameterList CaptionModel::all_parameters() const {
    auto out = encoder_parameters();
    for (auto& p : temporal_parameters()) out.push_back(std::move(p));
    for (auto& p : connector_parameters()) out.push_back(std::move(p));
    for (auto& p : decoder_parameters()) out.push_back(std::move(p));
    return out;
}

void CaptionModel::freeze_backbones() const {
    nn::set_trainable(frozen_parameters(), false);
    nn::set_trainable(trainable_parameters(), true);
}

tokmerge::MergeSchedule CaptionModel::schedule_for(std::size_t frames) const {
    auto s = config_.connector.schedule;
    if (frames > 1) s.r = static_cast<int>(std::llround(s.r * config_.video_r_multiplier));
    return s;
}

temporal::EncoderState CaptionModel::encode_prefix(const Tensor& pixels) const {
    if (pixels.rank() != 5 || pixels.dim(0) != 1) {
        throw DimensionError("caption model takes one sample [1, N, H, W, C], got " + to_string(pixels.shape()));
    }
    return encoder.frozen_prefix(pixels, true);
}

connector::TomeFormerOutput CaptionModel::prompts_from(const temporal::EncoderState& state) const {
    const temporal::FrameBatch out = encoder.resume(state, true);
    const temporal::EncodedVideo enc = encoder.split(out, 0);
    std::optional<Tensor> cls;
    // with several frames the first frame's classification token is the protected one
    if (config_.connector.include_protected_token) cls = slice_rows(enc.cls, 0, 1);
    return connector.forward(enc.patch_tokens, cls, schedule_for(out.frames()), out.frames());
}

connector::TomeFormerOutput CaptionModel::prompts(const Tensor& pixels) const {
    return prompts_from(encode_prefix(pixels));
}

CaptionTokens CaptionModel::prepare(const std::vector<int>& ids) const {
    if (ids.size() < 2) throw DimensionError("caption needs at least <bos> and one more token");
    std::size_t n = ids.size() - 1;
    if (n > config_.decoder.caption_context) {
        n = config_.decoder.caption_context;
        ++truncations_;
    }
    return {{ids.begin(), ids.begin() + static_cast<long>(n)}, {ids.begin() + 1, ids.begin() + static_cast<long>(n) + 1}};
}

Tensor CaptionModel::caption_loss(std::span<const Tensor> prompts, std::span<const CaptionTokens> captions) const {
    if (prompts.empty() || prompts.size() != captions.size()) {
        throw DimensionError("caption_loss: need one prompt set per caption");
    }
    const std::size_t b = prompts.size(), p = prompts[0].dim(0), d = config_.decoder.model_dim;
    for (const auto& pr : prompts) {
        if (pr.rank() != 2 || pr.dim(0) != p || pr.dim(1) != d) {
            throw DimensionError("caption_loss: prompt sets must all be [" + std::to_string(p) + ", " +
                                 std::to_string(d) + "], got " + to_string(pr.shape()));
        }
    }
    std::size_t t = 0;
    for (const auto& c : captions) t = std::max(t, c.inputs.size());
    std::vector<std::vector<int>> inputs;
    std::vector<int> targets;
    for (const auto& c : captions) {
        auto row = c.inputs;
        row.resize(t, Vocabulary::kPad);
        inputs.push_back(std::move(row));
        targets.insert(targets.end(), c.targets.begin(), c.targets.end());
        targets.insert(targets.end(), t - c.targets.size(), Vocabulary::kPad);
    }
    const Tensor stacked = reshape(concat_rows(prompts), {b, p, d});
    const Tensor logits = decoder.forward(stacked, inputs);
    return cross_entropy(reshape(logits, {b * t, config_.decoder.vocab_size}), targets, Vocabulary::kPad);
}

Tensor forward_loss(const CaptionModel& model, const Tensor& pixels, const std::vector<int>& ids) {
    const Tensor prompts = model.prompts(pixels).prompts;
    const CaptionTokens caption = model.prepare(ids);
    return model.caption_loss(std::span(&prompts, 1), std::span(&caption, 1));
}

void TrainConfig::validate() const {
    if (!(start_lr <= min_lr && min_lr <= max_lr)) throw ConfigError("learning rates must satisfy start <= min <= max");
    if (start_lr < 0.0) throw ConfigError("learning rates must be non-negative");
    if (warmup_steps >= total_steps) throw ConfigError("warmup_steps must be smaller than total_steps");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
}

double lr_at(std::size_t step, const TrainConfig& config) {
    if (step > config.total_steps) {
        throw ContractError("lr_at: step " + std::to_string(step) + " beyond total_steps " +
                            std::to_string(config.total_steps));
    }
    if (step < config.warmup_steps) {
        return std::lerp(config.start_lr, config.max_lr,
                         static_cast<double>(step) / static_cast<double>(config.warmup_steps));
    }
    const double progress = static_cast<double>(step - config.warmup_steps) /
                            static_cast<double>(config.total_steps - config.warmup_steps);
    const double f = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    return std::lerp(config.min_lr, config.max_lr, f);
}

AdamW::AdamW(nn::ParameterList params, double beta1, double beta2, double eps, double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
    for (const auto& p : params_) {
        if (!p.value.requires_grad()) throw ContractError("AdamW: parameter " + p.name + " is frozen");
        m_.emplace_back(p.value.numel(), 0.0);
        v_.emplace_back(p.value.numel(), 0.0);
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
}

void AdamW::step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor w = params_[i].value;
        if (!w.has_grad()) continue;
        const auto g = w.grad();
        auto x = w.mutable_data();
        auto& m = m_[i];
        auto& v = v_[i];
        const bool decay = w.rank() >= 2 && weight_decay_ > 0.0;
        for (std::size_t j = 0; j < x.size(); ++j) {
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
            if (decay) x[j] -= lr * weight_decay_ * x[j];
            x[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
        }
    }
}

std::string TrainingLog::to_tsv(bool with_wall_clock) const {
    std::ostringstream os;
    os << std::setprecision(17);
    for (const auto& r : rows) {
        os << r.step << '\t' << r.loss << '\t' << r.lr;
        if (with_wall_clock) os << '\t' << std::fixed << std::setprecision(3) << r.wall_ms << std::defaultfloat
                                << std::setprecision(17);
        os << '\n';
    }
    return os.str();
}

double TrainingLog::tail_mean(std::size_t n) const {
    if (rows.empty()) return 0.0;
    n = std::min(n, rows.size());
    double s = 0.0;
    for (std::size_t i = rows.size() - n; i < rows.size(); ++i) s += rows[i].loss;
    return s / static_cast<double>(n);
}

Example make_example(const datagen::Sample& sample, const Vocabulary& vocab) {
    return {datagen::to_pixels(sample.frames), vocab.encode(sample.caption), sample.caption};
}

TrainingLog train(CaptionModel& model, std::span<const Example> data, const TrainConfig& config,
                  const TrainOptions& options) {
    config.validate();
    if (data.empty()) throw ContractError("train: empty dataset");
    model.freeze_backbones();

    std::vector<temporal::EncoderState> states;
    std::vector<CaptionTokens> captions;
    for (const auto& ex : data) {
        states.push_back(model.encode_prefix(ex.pixels));
        captions.push_back(model.prepare(ex.ids));
    }

    AdamW optimizer(model.trainable_parameters(), config.beta1, config.beta2, config.adam_eps, config.weight_decay);
    Rng rng(derive_seed(config.seed, 7));
    std::vector<std::size_t> order(data.size());
    std::size_t cursor = order.size();
    auto next_index = [&]() {
        if (cursor == order.size()) {
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
            cursor = 0;
        }
        return order[cursor++];
    };

    TrainingLog log;
    const auto start = std::chrono::steady_clock::now();
    const std::size_t batch = std::min(config.batch_size, data.size());
    for (std::size_t step = 0; step < config.total_steps; ++step) {
        const double lr = lr_at(step, config);
        std::vector<Tensor> prompts;
        std::vector<CaptionTokens> batch_captions;
        for (std::size_t i = 0; i < batch; ++i) {
            const std::size_t idx = next_index();
            prompts.push_back(model.prompts_from(states[idx]).prompts);
            batch_captions.push_back(captions[idx]);
        }
        const Tensor loss = model.caption_loss(prompts, batch_captions);
        const double value = loss.item();
        if (!std::isfinite(value)) {
            throw std::runtime_error("training diverged at step " + std::to_string(step) + " (loss " +
                                     std::to_string(value) + ")");
        }
        optimizer.zero_grad();
        backward(loss);
        optimizer.step(lr);

        const double wall =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        log.rows.push_back({step, value, lr, wall});
        if (options.on_step) options.on_step(log.rows.back());
    }
    return log;
}

namespace {

std::size_t argmax_row(std::span<const double> values, std::size_t offset, std::size_t n) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j) {
        if (values[offset + j] > values[offset + best]) best = j;
    }
    return best;
}

}  // namespace

std::vector<int> generate(const CaptionModel& model, const Tensor& pixels, std::size_t max_len) {
    const auto& dc = model.config().decoder;
    if (max_len == 0 || max_len > dc.caption_context) {
        throw ContractError("generate: max_len must be in 1.." + std::to_string(dc.caption_context));
    }
    NoGradGuard no_grad;
    const Tensor prompts = model.prompts(pixels).prompts;
    const Tensor prefix = reshape(prompts, {1, prompts.dim(0), prompts.dim(1)});
    std::vector<std::vector<int>> ids{{Vocabulary::kBos}};
    std::vector<int> out;
    while (out.size() < max_len) {
        const Tensor logits = model.decoder.forward(prefix, ids);
        const std::size_t t = ids[0].size();
        const int next = static_cast<int>(argmax_row(logits.data(), (t - 1) * dc.vocab_size, dc.vocab_size));
        out.push_back(next);
        if (next == Vocabulary::kEos) break;
        ids[0].push_back(next);
    }
    return out;
}

std::string describe(const CaptionModel& model, const Tensor& pixels) {
    return model.vocabulary().decode(generate(model, pixels, model.config().decoder.caption_context));
}

namespace {

Tensor stack_frames(const std::vector<datagen::Image>& images) {
    const std::size_t b = images.size(), h = static_cast<std::size_t>(images[0].height),
                      w = static_cast<std::size_t>(images[0].width);
    std::vector<double> data;
    data.reserve(b * h * w * 3);
    for (const auto& img : images)
        for (auto v : img.rgb) data.push_back(v / 255.0);
    return Tensor::from({b, 1, h, w, 3}, std::move(data));
}

void pretrain_encoder(CaptionModel& model, const PretrainConfig& config) {
    auto& enc = model.encoder;
    const auto& ec = enc.config();
    const nn::ParameterList params = model.encoder_parameters();
    nn::set_trainable(params, true);
    Rng head_rng(derive_seed(config.seed, 21));
    const nn::Linear head = nn::Linear::create(ec.model_dim, ec.patch_dim(), head_rng, ec.init_std);
    nn::ParameterList all = params;
    head.collect(all, "head");
    AdamW opt(all, 0.9, 0.98, 1e-8, 0.0);
    Rng data_rng(derive_seed(config.seed, 22));

    const std::size_t l = ec.patches_per_frame(), t = enc.tokens_per_frame(), first = ec.use_cls ? 1 : 0;
    for (std::size_t step = 0; step < config.encoder_steps; ++step) {
        std::vector<datagen::Image> images;
        for (std::size_t i = 0; i < config.batch_size; ++i) {
            const std::uint64_t seed = data_rng.next();
            images.push_back(i % 2 == 0 ? datagen::render(datagen::sample_image_scene(seed), 0)
                                        : datagen::render(datagen::sample_video_scene(seed, 1), 0));
        }
        const Tensor pixels = stack_frames(images);
        const temporal::FrameBatch out = enc.forward(pixels, false);
        const Tensor rows = reshape(out.activations, {config.batch_size * t, ec.model_dim});
        std::vector<std::vector<RowTerm>> pick;
        for (std::size_t s = 0; s < config.batch_size; ++s)
            for (std::size_t i = first; i < t; ++i) pick.push_back({{s * t + i, 1.0}});
        const Tensor predicted = head(combine_rows(rows, pick));
        const Tensor target = reshape(enc.patchify(pixels), {config.batch_size * l, ec.patch_dim()});
        const Tensor loss = mse_loss(predicted, target);
        opt.zero_grad();
        backward(loss);
        opt.step(config.encoder_lr);
    }
}

void pretrain_decoder(CaptionModel& model, const PretrainConfig& config) {
    const nn::ParameterList params = model.decoder_parameters();
    nn::set_trainable(params, true);
    AdamW opt(params, 0.9, 0.98, 1e-8, 0.0);
    Rng data_rng(derive_seed(config.seed, 31));
    const std::size_t frames = std::max<std::size_t>(2, config.video_frames);
    for (std::size_t step = 0; step < config.decoder_steps; ++step) {
        std::vector<CaptionTokens> captions;
        std::size_t t = 0;
        for (std::size_t i = 0; i < config.batch_size; ++i) {
            const std::uint64_t seed = data_rng.next();
            const auto scene = i % 2 == 0 ? datagen::sample_image_scene(seed) : datagen::sample_video_scene(seed, frames);
            captions.push_back(model.prepare(model.vocabulary().encode(datagen::caption_for(datagen::summarize(scene)))));
            t = std::max(t, captions.back().inputs.size());
        }
        std::vector<std::vector<int>> inputs;
        std::vector<int> targets;
        for (const auto& c : captions) {
            auto row = c.inputs;
            row.resize(t, Vocabulary::kPad);
            inputs.push_back(std::move(row));
            targets.insert(targets.end(), c.targets.begin(), c.targets.end());
            targets.insert(targets.end(), t - c.targets.size(), Vocabulary::kPad);
        }
        // Every other step the caption is also given as preceding context: one
        // item per caption token, its word embedding plus the position embedding of
        // the slot it fills, in shuffled order and padded to a random width. The
        // decoder learns to look words up by position, which is what soft prompts
        // later have to drive, the way a pretrained language model reads context.
        Tensor context;
        if (step % 2 == 1) {
            const std::size_t width = 2 * model.config().decoder.caption_context;
            const std::size_t d = model.config().decoder.model_dim;
            std::vector<int> words, slots;
            std::vector<double> keep;
            for (const auto& c : captions) {
                std::vector<std::pair<int, int>> items;  // (word, position)
                for (std::size_t j = 1; j < c.inputs.size(); ++j) items.emplace_back(c.inputs[j], static_cast<int>(j));
                const std::size_t n = c.inputs.size();
                if (n < model.config().decoder.caption_context) items.emplace_back(c.targets.back(), static_cast<int>(n));
                for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[data_rng.index(i)]);
                items.resize(width, {Vocabulary::kPad, -1});
                for (const auto& [w, pos] : items) {
                    words.push_back(w);
                    slots.push_back(std::max(pos, 0));
                    keep.insert(keep.end(), d, pos < 0 ? 0.0 : 1.0);
                }
            }
            const Tensor where = mul(embedding(model.decoder.position, slots), Tensor::from({words.size(), d}, keep));
            context = reshape(add(embedding(model.decoder.token_embedding, words), where), {captions.size(), width, d});
        }
        const Tensor logits = model.decoder.forward(context, inputs);
        const Tensor loss = cross_entropy(reshape(logits, {captions.size() * t, model.config().decoder.vocab_size}),
                                          targets, Vocabulary::kPad);
        opt.zero_grad();
        backward(loss);
        opt.step(config.decoder_lr);
    }
}

}  // namespace

void pretrain_backbones(CaptionModel& model, const PretrainConfig& config) {
    if (config.batch_size == 0) throw ConfigError("pretrain batch_size must be positive");
    nn::set_trainable(model.trainable_parameters(), false);
    nn::set_trainable(model.decoder_parameters(), false);
    pretrain_encoder(model, config);
    nn::set_trainable(model.encoder_parameters(), false);
    pretrain_decoder(model, config);
    model.freeze_backbones();
}

}  // namespace evl::captioner
