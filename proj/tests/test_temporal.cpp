// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "evl/gradcheck.hpp"
#include "evl/temporal.hpp"
#include "helpers.hpp"

using namespace evl;
using namespace evl::temporal;

namespace {

EncoderConfig tiny_encoder(bool temporal = true) {
    EncoderConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.model_dim = 8;
    c.num_heads = 2;
    c.num_layers = 2;
    c.init_std = 0.3;
    if (temporal) c.temporal_blocks = {0, 1};
    return c;
}

// Explicit per-position loop: v'' = v' + softmax(q k^T) v'.
std::vector<double> temporal_loop(const Tensor& v, const TemporalModule& m) {
    const std::size_t b = v.dim(0), n = v.dim(1), l = v.dim(2), d = v.dim(3);
    auto at = [&](std::size_t bi, std::size_t f, std::size_t t, std::size_t c) { return v[((bi * n + f) * l + t) * d + c]; };
    auto project = [&](const nn::Linear& lin, std::size_t bi, std::size_t f, std::size_t t) {
        std::vector<double> out(d, 0.0);
        for (std::size_t o = 0; o < d; ++o) {
            double s = lin.bias.defined() ? lin.bias[o] : 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                double in = at(bi, f, t, i);
                if (m.options.position_encoding) in += m.frame_embedding[f * d + i];
                s += in * lin.weight[i * d + o];
            }
            out[o] = s;
        }
        return out;
    };
    std::vector<double> out(v.numel());
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t t = 0; t < l; ++t) {
            std::vector<std::vector<double>> q, k;
            for (std::size_t f = 0; f < n; ++f) {
                q.push_back(project(m.query, bi, f, t));
                k.push_back(project(m.key, bi, f, t));
            }
            for (std::size_t f = 0; f < n; ++f) {
                std::vector<double> logit(n);
                double hi = -INFINITY;
                for (std::size_t g = 0; g < n; ++g) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < d; ++c) s += q[f][c] * k[g][c];
                    if (m.options.logit_scaling) s /= std::sqrt(static_cast<double>(d));
                    logit[g] = s;
                    hi = std::max(hi, s);
                }
                double z = 0.0;
                for (auto& x : logit) z += (x = std::exp(x - hi));
                for (std::size_t c = 0; c < d; ++c) {
                    double mix = 0.0;
                    for (std::size_t g = 0; g < n; ++g) mix += logit[g] / z * at(bi, g, t, c);
                    out[((bi * n + f) * l + t) * d + c] = at(bi, f, t, c) + mix;
                }
            }
        }
    return out;
}

TemporalModule random_module(std::size_t d, TemporalOptions opts, Rng& rng) {
    TemporalModule m = TemporalModule::create(d, opts, rng, 0.5);
    // nonzero query bias so the loop oracle exercises it
    m.query.bias = test::randn({d}, rng, 0.3, true);
    return m;
}

}  // namespace

TEST_CASE("frame batch views round trip") {
    Rng rng(1);
    const Tensor a = test::randn({2, 3, 4, 5}, rng);
    const FrameBatch fb{a};
    CHECK(fb.spatial_view().shape() == Shape{6, 4, 5});
    CHECK(fb.temporal_view().shape() == Shape{8, 3, 5});
    CHECK(test::bitwise_equal(FrameBatch::from_spatial(fb.spatial_view(), 2, 3).activations.data(), a.data()));
    CHECK(test::bitwise_equal(FrameBatch::from_temporal(fb.temporal_view(), 2, 4).activations.data(), a.data()));
    // temporal row (b=1, l=2) frame 1 is activations[1, 1, 2]
    const Tensor tv = fb.temporal_view();
    for (std::size_t c = 0; c < 5; ++c) CHECK(tv[((1 * 4 + 2) * 3 + 1) * 5 + c] == a[((1 * 3 + 1) * 4 + 2) * 5 + c]);
}

TEST_CASE("temporal_contextualize matches the loop oracle") {
    Rng rng(2);
    for (int flags = 0; flags < 4; ++flags) {
        TemporalOptions opts;
        opts.logit_scaling = flags & 1;
        opts.position_encoding = flags & 2;
        const TemporalModule m = random_module(6, opts, rng);
        const Tensor v = test::randn({2, 3, 4, 6}, rng);
        const auto got = temporal_contextualize(FrameBatch{v}, m).activations;
        CAPTURE(flags);
        CHECK(got.shape() == v.shape());
        CHECK(test::max_abs_diff(got.data(), temporal_loop(v, m)) < 1e-12);
    }
}

TEST_CASE("static-input laws") {
    Rng rng(3);
    for (bool pe : {false, true}) {
        TemporalOptions opts;
        opts.position_encoding = pe;
        const TemporalModule m = random_module(6, opts, rng);
        const Tensor one = test::randn({2, 1, 5, 6}, rng);
        const auto out1 = temporal_contextualize(FrameBatch{one}, m).activations;
        CHECK(test::bitwise_equal(out1.data(), scale(one, 2.0).data()));

        // four identical frames
        std::vector<double> rep;
        const auto frame = test::randn({1, 1, 5, 6}, rng);
        for (int f = 0; f < 4; ++f) rep.insert(rep.end(), frame.data().begin(), frame.data().end());
        const Tensor four = Tensor::from({1, 4, 5, 6}, rep);
        const auto out4 = temporal_contextualize(FrameBatch{four}, m).activations;
        CHECK(test::max_abs_diff(out4.data(), scale(four, 2.0).data()) < 1e-10);
    }
}

TEST_CASE("position encoding rejects too many frames") {
    Rng rng(4);
    TemporalOptions opts;
    opts.position_encoding = true;
    opts.max_frames = 2;
    const TemporalModule m = random_module(4, opts, rng);
    CHECK_THROWS_AS(temporal_contextualize(FrameBatch{test::randn({1, 3, 2, 4}, rng)}, m), DimensionError);
}

TEST_CASE("spatial_attend equals attention looped over frames") {
    Rng rng(5);
    const VisionEncoder enc(tiny_encoder(), rng);
    const Tensor v = test::randn({2, 3, 5, 8}, rng);
    const Tensor got = spatial_attend(FrameBatch{v}, enc.blocks[0]).activations;
    CHECK(got.shape() == v.shape());
    for (std::size_t f = 0; f < 6; ++f) {
        const Tensor frame = slice_rows(reshape(v, {6, 5, 8}), f, f + 1);
        const Tensor want = add(frame, enc.blocks[0].attention(enc.blocks[0].norm1(frame)).out);
        CHECK(test::max_abs_diff(got.data().subspan(f * 40, 40), want.data()) < 1e-12);
    }
}

TEST_CASE("identical frames give identical spatial outputs") {
    Rng rng(6);
    const VisionEncoder enc(tiny_encoder(), rng);
    const Tensor frame = test::randn({1, 1, 5, 8}, rng);
    std::vector<double> two(frame.data().begin(), frame.data().end());
    two.insert(two.end(), frame.data().begin(), frame.data().end());
    const Tensor got = spatial_attend(FrameBatch{Tensor::from({1, 2, 5, 8}, two)}, enc.blocks[0]).activations;
    CHECK(test::bitwise_equal(got.data().subspan(0, 40), got.data().subspan(40, 40)));
}

TEST_CASE("encoder configuration errors") {
    auto c = tiny_encoder();
    c.image_size = 10;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_encoder();
    c.temporal_blocks = {2};
    CHECK_THROWS_AS(c.validate(), ConfigError);

    Rng rng(7);
    const VisionEncoder enc(tiny_encoder(), rng);
    CHECK_THROWS_AS(enc.patchify(Tensor::zeros({1, 1, 6, 6, 3})), ConfigError);
    CHECK_THROWS_AS(enc.forward(Tensor::zeros({1, 1, 12, 12, 3})), DimensionError);
}

TEST_CASE("encode_video concatenates frames") {
    Rng rng(8);
    const VisionEncoder enc(tiny_encoder(), rng);
    const Tensor pixels = test::randn({2, 3, 8, 8, 3}, rng, 0.5);
    const auto batches = encode_video(pixels, enc);
    REQUIRE(batches.size() == 2);
    CHECK(batches[0].count() == 3 * 4);
    CHECK(batches[0].tokens.shape() == Shape{12, 8});
    CHECK(tokmerge::is_partition(batches[1].groups, 12));
}

TEST_CASE("single frame post-norm activations equal the image path") {
    Rng rng(9);
    const VisionEncoder enc(tiny_encoder(), rng);
    const Tensor pixels = test::randn({1, 1, 8, 8, 3}, rng, 0.5);
    std::vector<BlockTrace> video, image;
    enc.forward(pixels, true, &video);
    enc.forward(pixels, false, &image);
    CHECK(test::bitwise_equal(video[0].after_temporal.data(), scale(video[0].after_attention, 2.0).data()));
    CHECK(test::max_abs_diff(video[0].post_norm.data(), image[0].post_norm.data()) < 1e-9);
}

TEST_CASE("frame permutation permutes outputs") {
    Rng rng(10);
    const VisionEncoder enc(tiny_encoder(), rng);
    const Tensor pixels = test::randn({1, 3, 8, 8, 3}, rng, 0.5);
    const std::size_t frame = 8 * 8 * 3;
    std::vector<double> permuted;
    const std::size_t perm[3] = {2, 0, 1};
    for (std::size_t f : perm) permuted.insert(permuted.end(), pixels.data().begin() + f * frame, pixels.data().begin() + (f + 1) * frame);
    const auto a = enc.forward(pixels).activations;
    const auto b = enc.forward(Tensor::from({1, 3, 8, 8, 3}, permuted)).activations;
    const std::size_t per = a.numel() / 3;
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(test::max_abs_diff(b.data().subspan(i * per, per), a.data().subspan(perm[i] * per, per)) < 1e-10);
}

TEST_CASE("frozen prefix resumes to the full forward") {
    Rng rng(11);
    auto c = tiny_encoder();
    c.temporal_blocks = {1};
    const VisionEncoder enc(c, rng);
    const Tensor pixels = test::randn({1, 2, 8, 8, 3}, rng, 0.5);
    const auto full = enc.forward(pixels).activations;
    const auto resumed = enc.resume(enc.frozen_prefix(pixels)).activations;
    CHECK(test::bitwise_equal(full.data(), resumed.data()));
}

TEST_CASE("only temporal weights learn inside a frozen encoder") {
    Rng rng(12);
    const VisionEncoder enc(tiny_encoder(), rng);
    nn::ParameterList frozen, temporal_params;
    enc.collect(frozen, "encoder");
    enc.collect_temporal(temporal_params, "temporal");
    nn::set_trainable(frozen, false);
    nn::set_trainable(temporal_params, true);
    const Tensor pixels = test::randn({1, 3, 8, 8, 3}, rng, 0.5);
    const Tensor probe = test::randn({1, 3, 5, 8}, rng);
    auto f = [&] { return sum(mul(enc.forward(pixels).activations, probe)); };
    backward(f());
    for (const auto& p : frozen) CHECK_FALSE(p.value.has_grad());
    for (const auto& p : temporal_params) {
        CAPTURE(p.name);
        REQUIRE(p.value.has_grad());
        double norm = 0.0;
        for (double g : p.value.grad()) norm += g * g;
        CHECK(norm > 0.0);
    }
    std::vector<Tensor> tensors;
    for (auto& p : temporal_params) tensors.push_back(p.value);
    CHECK(finite_diff_check(f, tensors, {1e-5, 32, 3}).max_rel_error < 1e-4);
}

TEST_CASE("check_properties reports") {
    Rng rng(13);
    const VisionEncoder enc(tiny_encoder(), rng);
    const auto checks = check_properties(enc, 1);
    REQUIRE(checks.size() == 4);
    for (const auto& c : checks) {
        CAPTURE(c.name);
        CHECK(c.status == CheckStatus::pass);
        CHECK(c.max_diff <= c.tolerance);
    }
    auto pe = tiny_encoder();
    pe.temporal.position_encoding = true;
    Rng rng2(13);
    const auto pe_checks = check_properties(VisionEncoder(pe, rng2), 1);
    CHECK(pe_checks.back().status == CheckStatus::skipped);
    for (std::size_t i = 0; i + 1 < pe_checks.size(); ++i) CHECK(pe_checks[i].status == CheckStatus::pass);
    CHECK(std::string(status_name(CheckStatus::skipped)) == "skipped");

    Rng rng3(13);
    CHECK_THROWS_AS(check_properties(VisionEncoder(tiny_encoder(false), rng3), 1), ConfigError);
}
