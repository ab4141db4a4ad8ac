// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "evl/captioner.hpp"
#include "evl/gradcheck.hpp"
#include "helpers.hpp"

using namespace evl;
using namespace evl::captioner;

namespace {

ModelConfig tiny_model(std::uint64_t seed = 0) {
    ModelConfig m;
    m.connector.num_layers = 2;
    m.connector.model_dim = 32;
    m.connector.num_heads = 2;
    m.connector.schedule = {16, 2};
    m.seed = seed;
    return m;
}

std::vector<Example> image_examples(const CaptionModel& model, std::size_t n, std::uint64_t seed) {
    std::vector<Example> out;
    for (std::size_t i = 0; i < n; ++i)
        out.push_back(make_example(datagen::gen_image_sample(derive_seed(seed, i)), model.vocabulary()));
    return out;
}

TrainConfig short_run(std::size_t steps, std::uint64_t seed = 0) {
    TrainConfig t;
    t.max_lr = 1e-3;
    t.min_lr = 1e-4;
    t.start_lr = 1e-5;
    t.warmup_steps = 2;
    t.total_steps = steps;
    t.batch_size = 4;
    t.seed = seed;
    return t;
}

std::vector<std::vector<double>> snapshot(const nn::ParameterList& params) {
    std::vector<std::vector<double>> out;
    for (const auto& p : params) out.push_back(test::values(p.value));
    return out;
}

std::set<std::string> names(const nn::ParameterList& params) {
    std::set<std::string> out;
    for (const auto& p : params) out.insert(p.name);
    return out;
}

}  // namespace

TEST_CASE("lr schedule examples") {
    const TrainConfig c;  // 1e-6 -> 1e-4 over 5000 steps, cosine to 1e-5
    CHECK(lr_at(0, c) == 1e-6);
    CHECK(lr_at(c.warmup_steps, c) == 1e-4);
    CHECK(lr_at(c.total_steps, c) == 1e-5);
    CHECK(lr_at(2500, c) == doctest::Approx((1e-6 + 1e-4) / 2).epsilon(1e-12));
    CHECK_THROWS_AS(lr_at(c.total_steps + 1, c), ContractError);
}

TEST_CASE("lr schedule is continuous at the boundary and monotone after it") {
    for (std::size_t warmup : {1, 10, 5000})
        for (std::size_t total : {warmup + 1, warmup + 7, warmup + 20000}) {
            TrainConfig c;
            c.warmup_steps = warmup;
            c.total_steps = total;
            const double step_up = (c.max_lr - c.start_lr) / static_cast<double>(warmup);
            CHECK(std::abs(lr_at(warmup, c) - lr_at(warmup - 1, c)) <= step_up * (1 + 1e-9));
            for (std::size_t s = warmup; s < total; ++s) CHECK(lr_at(s + 1, c) <= lr_at(s, c));
            for (std::size_t s = 0; s < warmup; ++s) CHECK(lr_at(s + 1, c) >= lr_at(s, c));
        }
}

TEST_CASE("train config validation") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate());
    c.min_lr = 2e-4;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.warmup_steps = c.total_steps;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);

    auto m = tiny_model();
    m.decoder.vocab_size = 16;
    CHECK_THROWS_AS(m.validate(), ConfigError);
}

TEST_CASE("derive_seed separates streams") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t s = 0; s < 8; ++s)
        for (std::uint64_t stream = 0; stream < 8; ++stream) seen.insert(derive_seed(s, stream));
    CHECK(seen.size() == 64);
    CHECK(derive_seed(3, 1) == derive_seed(3, 1));
}

TEST_CASE("parameter groups") {
    auto cfg = tiny_model();
    cfg.encoder.temporal_blocks = {1};
    const CaptionModel model(cfg);
    const auto trainable = names(model.trainable_parameters());
    auto want = names(model.connector_parameters());
    for (const auto& n : names(model.temporal_parameters())) want.insert(n);
    CHECK(trainable == want);
    CHECK(names(model.temporal_parameters()).size() == 3);  // query weight and bias, key weight
    for (const auto& n : names(model.frozen_parameters())) CHECK(trainable.count(n) == 0);
    CHECK(model.all_parameters().size() == model.trainable_parameters().size() + model.frozen_parameters().size());
}

TEST_CASE("initial loss is near uniform and always finite") {
    const CaptionModel model(tiny_model(1));
    const auto data = image_examples(model, 12, 1);
    double total = 0.0;
    for (const auto& ex : data) {
        const double l = forward_loss(model, ex.pixels, ex.ids).item();
        CHECK(std::isfinite(l));
        CHECK(l > 0.0);
        total += l;
    }
    CHECK(std::abs(total / data.size() - std::log(18.0)) < 0.5);
}

TEST_CASE("caption loss gradient matches central differences") {
    auto cfg = tiny_model(2);
    cfg.connector.init_std = 0.3;
    cfg.connector.model_dim = 16;
    const CaptionModel model(cfg);
    model.freeze_backbones();
    const auto ex = image_examples(model, 1, 2)[0];
    auto params = model.connector_parameters();
    std::vector<Tensor> tensors;
    for (auto& p : params)
        if (p.name.find("proj_out.weight") != std::string::npos || p.name.find("layers.1.mlp.fc1.weight") != std::string::npos)
            tensors.push_back(p.value);
    REQUIRE(tensors.size() == 2);
    const auto res = finite_diff_check([&] { return forward_loss(model, ex.pixels, ex.ids); }, tensors, {1e-5, 24, 2});
    CAPTURE(res.worst_analytic);
    CAPTURE(res.worst_numeric);
    CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("frozen parameters get no gradient and never move") {
    CaptionModel model(tiny_model(3));
    const auto data = image_examples(model, 8, 3);
    model.freeze_backbones();
    backward(forward_loss(model, data[0].pixels, data[0].ids));
    for (const auto& p : model.frozen_parameters()) CHECK_FALSE(p.value.has_grad());
    for (const auto& p : model.connector_parameters()) CHECK(p.value.has_grad());

    const auto frozen = snapshot(model.frozen_parameters());
    const auto before = snapshot(model.connector_parameters());
    train(model, data, short_run(6));
    const auto after = model.frozen_parameters();
    for (std::size_t i = 0; i < after.size(); ++i) CHECK(test::bitwise_equal(frozen[i], after[i].value.data()));
    bool moved = false;
    const auto conn = model.connector_parameters();
    for (std::size_t i = 0; i < conn.size(); ++i) moved |= !test::bitwise_equal(before[i], conn[i].value.data());
    CHECK(moved);

    CHECK_THROWS_AS(AdamW(model.frozen_parameters(), 0.9, 0.98, 1e-8, 0.0), ContractError);
    const AdamW opt(model.trainable_parameters(), 0.9, 0.98, 1e-8, 0.0);
    CHECK(opt.state_tensors() == model.trainable_parameters().size());
}

TEST_CASE("adamw first step and decoupled decay") {
    Tensor w = Tensor::from({1, 2}, {1.0, -2.0}, true);
    Tensor b = Tensor::from({2}, {0.5, 0.5}, true);
    AdamW opt({{"w", w}, {"b", b}}, 0.9, 0.98, 1e-8, 0.1);
    backward(sum(add(mul(w, Tensor::from({1, 2}, {3.0, -4.0})), b)));
    opt.step(0.01);
    // bias-corrected first step moves each coordinate by lr * sign(grad)
    CHECK(w[0] == doctest::Approx(1.0 - 0.01 * 0.1 * 1.0 - 0.01).epsilon(1e-9));
    CHECK(w[1] == doctest::Approx(-2.0 - 0.01 * 0.1 * -2.0 + 0.01).epsilon(1e-9));
    CHECK(b[0] == doctest::Approx(0.5 - 0.01).epsilon(1e-9));  // no decay on vectors
}

TEST_CASE("training is deterministic and logs every step") {
    auto run = [] {
        CaptionModel model(tiny_model(4));
        const auto data = image_examples(model, 6, 4);
        return train(model, data, short_run(5, 9));
    };
    const auto a = run(), b = run();
    REQUIRE(a.rows.size() == 5);
    CHECK(a.to_tsv(false) == b.to_tsv(false));
    for (std::size_t i = 0; i < 5; ++i) CHECK(a.rows[i].step == i);

    std::istringstream lines(a.to_tsv(true));
    std::string line;
    std::getline(lines, line);
    CHECK(std::count(line.begin(), line.end(), '\t') == 3);
    std::istringstream fields(a.to_tsv(false));
    std::size_t step;
    double loss, lr;
    fields >> step >> loss >> lr;
    CHECK(loss == a.rows[0].loss);  // 17 significant digits round trip
    CHECK(lr == a.rows[0].lr);

    TrainingLog log;
    log.rows = {{0, 4.0, 0.0, 0.0}, {1, 2.0, 0.0, 0.0}, {2, 1.0, 0.0, 0.0}};
    CHECK(log.tail_mean(2) == 1.5);
    CHECK(log.tail_mean(10) == doctest::Approx(7.0 / 3.0));
}

TEST_CASE("train rejects an empty dataset") {
    CaptionModel model(tiny_model());
    CHECK_THROWS_AS(train(model, std::span<const Example>(), short_run(3)), ContractError);
}

TEST_CASE("decoder mask: captions see every prompt and only earlier captions") {
    const CaptionModel model(tiny_model(5));
    Rng rng(5);
    const Tensor prompts = test::randn({1, 6, 32}, rng);
    const std::vector<std::vector<int>> ids{{1, 5, 6, 7, 8}};
    const Tensor base = model.decoder.forward(prompts, ids);
    REQUIRE(base.shape() == Shape{1, 5, 18});

    for (std::size_t t = 0; t < 5; ++t) {
        auto changed = ids;
        changed[0][t] = 9;
        const Tensor moved = model.decoder.forward(prompts, changed);
        CHECK(test::max_abs_diff(base.data().subspan(0, t * 18), moved.data().subspan(0, t * 18)) == 0.0);
        CHECK(test::max_abs_diff(base.data().subspan(t * 18), moved.data().subspan(t * 18)) > 0.0);
    }
    // the last prompt row reaches the first caption position
    auto pv = test::values(prompts);
    for (std::size_t c = 0; c < 32; ++c) pv[5 * 32 + c] += 0.5;
    const Tensor moved = model.decoder.forward(Tensor::from({1, 6, 32}, pv), ids);
    for (std::size_t t = 0; t < 5; ++t)
        CHECK(test::max_abs_diff(base.data().subspan(t * 18, 18), moved.data().subspan(t * 18, 18)) > 0.0);
}

TEST_CASE("prepare truncates to the decoder context") {
    const CaptionModel model(tiny_model());
    const auto c = model.prepare({1, 5, 6, 2});
    CHECK(c.inputs == std::vector<int>{1, 5, 6});
    CHECK(c.targets == std::vector<int>{5, 6, 2});
    CHECK(model.truncations() == 0);
    std::vector<int> long_ids(30, 5);
    const auto t = model.prepare(long_ids);
    CHECK(t.inputs.size() == model.config().decoder.caption_context);
    CHECK(t.targets.size() == t.inputs.size());
    CHECK(model.truncations() == 1);
    CHECK_THROWS_AS(model.prepare({1}), DimensionError);
}

TEST_CASE("generation") {
    const CaptionModel model(tiny_model(6));
    const auto ex = image_examples(model, 1, 6)[0];
    CHECK(generate(model, ex.pixels, 1).size() == 1);
    CHECK_THROWS_AS(generate(model, ex.pixels, 0), ContractError);
    CHECK_THROWS_AS(generate(model, ex.pixels, 17), ContractError);
    const auto ids = generate(model, ex.pixels, 16);
    CHECK(ids == generate(model, ex.pixels, 16));
    CHECK(ids.size() <= 16);
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) CHECK(ids[i] != datagen::Vocabulary::kEos);

    // golden capture for the untrained model
    std::ostringstream got;
    for (std::size_t i = 0; i < ids.size(); ++i) got << (i ? " " : "") << ids[i];
    got << '\n';
    const std::filesystem::path golden = std::filesystem::path(EVL_GOLDEN_DIR) / "untrained_generation.txt";
    if (std::getenv("EVL_UPDATE_GOLDEN")) {
        std::ofstream(golden) << got.str();
    }
    std::ifstream in(golden);
    REQUIRE(in.good());
    std::stringstream want;
    want << in.rdbuf();
    CHECK(got.str() == want.str());
}

TEST_CASE("video schedule scales r") {
    auto cfg = tiny_model();
    cfg.video_r_multiplier = 6.0;
    const CaptionModel model(cfg);
    CHECK(model.schedule_for(1).r == 16);
    CHECK(model.schedule_for(4).r == 96);
    CHECK_THROWS_AS(model.encode_prefix(Tensor::zeros({2, 1, 32, 32, 3})), DimensionError);
}
