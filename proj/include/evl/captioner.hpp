// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "evl/connector.hpp"
#include "evl/datagen.hpp"
#include "evl/decoder.hpp"
#include "evl/temporal.hpp"

// Frozen encoder -> TomeFormer -> soft prompts -> frozen decoder, trained with
// the caption cross-entropy alone.
namespace evl::captioner {

struct ModelConfig {
    temporal::EncoderConfig encoder;
    connector::TomeFormerConfig connector;
    decoder::DecoderConfig decoder;
    // Scales the connector's r for multi-frame input (token count grows N-fold).
    double video_r_multiplier = 1.0;
    std::uint64_t seed = 0;

    void validate() const;
};

// splitmix64 over (seed, stream): independent generator seeds per component.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// Decoder input/target pair for one caption: inputs drop <eos>, targets drop <bos>.
struct CaptionTokens {
    std::vector<int> inputs;
    std::vector<int> targets;
};

class CaptionModel {
public:
    explicit CaptionModel(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    const datagen::Vocabulary& vocabulary() const { return vocab_; }

    nn::ParameterList encoder_parameters() const;
    nn::ParameterList temporal_parameters() const;
    nn::ParameterList connector_parameters() const;  // TomeFormer and both projections
    nn::ParameterList decoder_parameters() const;
    nn::ParameterList trainable_parameters() const;  // connector then temporal
    nn::ParameterList frozen_parameters() const;     // encoder then decoder
    nn::ParameterList all_parameters() const;        // checkpoint order

    // Marks encoder and decoder frozen and everything else trainable.
    void freeze_backbones() const;

    tokmerge::MergeSchedule schedule_for(std::size_t frames) const;

    // pixels: [1, N, H, W, C]. Encoder work that never needs gradients; the
    // state can be cached across training steps.
    temporal::EncoderState encode_prefix(const Tensor& pixels) const;
    connector::TomeFormerOutput prompts_from(const temporal::EncoderState& state) const;
    connector::TomeFormerOutput prompts(const Tensor& pixels) const;

    // Truncates to the decoder context; every truncation bumps truncations().
    CaptionTokens prepare(const std::vector<int>& ids) const;
    std::size_t truncations() const { return truncations_; }

    // Mean caption cross-entropy over a batch whose prompts share one length.
    Tensor caption_loss(std::span<const Tensor> prompts, std::span<const CaptionTokens> captions) const;

    temporal::VisionEncoder encoder;
    connector::TomeFormer connector;
    decoder::CausalDecoder decoder;

private:
    ModelConfig config_;
    datagen::Vocabulary vocab_;
    mutable std::size_t truncations_ = 0;
};

// Full forward from pixels, caption ids from Vocabulary::encode.
Tensor forward_loss(const CaptionModel& model, const Tensor& pixels, const std::vector<int>& ids);

struct TrainConfig {
    double max_lr = 1e-4;
    double min_lr = 1e-5;
    double start_lr = 1e-6;
    std::size_t warmup_steps = 5000;
    std::size_t total_steps = 100000;
    double weight_decay = 0.05;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-8;

    void validate() const;
};

// Linear warmup from start_lr to max_lr, then cosine decay to min_lr at total_steps.
double lr_at(std::size_t step, const TrainConfig& config);

// Adam with decoupled weight decay; decay touches matrices (rank >= 2) only.
class AdamW {
public:
    AdamW(nn::ParameterList params, double beta1, double beta2, double eps, double weight_decay);
    void step(double lr);
    void zero_grad();
    std::size_t state_tensors() const { return m_.size(); }
    const nn::ParameterList& parameters() const { return params_; }

private:
    nn::ParameterList params_;
    std::vector<std::vector<double>> m_, v_;
    double beta1_, beta2_, eps_, weight_decay_;
    std::size_t t_ = 0;
};

struct LogRow {
    std::size_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;
};

struct TrainingLog {
    std::vector<LogRow> rows;

    // One tab-separated row per step: step, loss, lr[, wall-ms]. Losses and
    // rates print with 17 significant digits so rows round-trip exactly.
    std::string to_tsv(bool with_wall_clock = true) const;
    double tail_mean(std::size_t n) const;
};

struct Example {
    Tensor pixels;  // [1, N, H, W, C]
    std::vector<int> ids;
    std::string caption;
};

Example make_example(const datagen::Sample& sample, const datagen::Vocabulary& vocab);

struct TrainOptions {
    std::function<void(const LogRow&)> on_step;
};

// Optimizes the trainable parameters only; throws std::runtime_error when the
// loss turns non-finite.
TrainingLog train(CaptionModel& model, std::span<const Example> data, const TrainConfig& config,
                  const TrainOptions& options = {});

// Greedy decoding from the soft prompt. Returns the generated ids (at most
// max_len, ending with <eos> when it was produced).
std::vector<int> generate(const CaptionModel& model, const Tensor& pixels, std::size_t max_len);
std::string describe(const CaptionModel& model, const Tensor& pixels);

struct PretrainConfig {
    std::size_t encoder_steps = 300;
    std::size_t decoder_steps = 2500;
    double encoder_lr = 1e-3;
    double decoder_lr = 3e-3;
    std::size_t batch_size = 16;
    std::size_t video_frames = 4;  // frame count used for the motion captions the decoder sees
    std::uint64_t seed = 1;
};

// Stand-in for loading pretrained backbones: the encoder learns to reconstruct
// its input patches through a temporary linear head, the decoder learns the
// caption grammar with no prompt. Both are frozen afterwards.
void pretrain_backbones(CaptionModel& model, const PretrainConfig& config);

}  // namespace evl::captioner
