// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "evl/gradcheck.hpp"
#include "evl/nn.hpp"
#include "helpers.hpp"

using namespace evl;
using evl::test::randn;

namespace {

// Scalar readout with a fixed random projection so every output element gets
// a distinct, nonzero upstream gradient.
Tensor readout(const Tensor& y, std::uint64_t seed = 99) {
    Rng rng(seed);
    return sum(mul(y, randn(y.shape(), rng)));
}

double check(const std::function<Tensor()>& f, std::vector<Tensor> params) {
    return finite_diff_check(f, params).max_rel_error;
}

}  // namespace

TEST_CASE("matmul examples") {
    const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    const Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
    CHECK(test::values(matmul(eye, m)) == std::vector<double>{1, 2, 3, 4});
    CHECK(test::values(matmul(Tensor::from({1, 2}, {1, 0}), Tensor::from({2, 1}, {0, 5}))) == std::vector<double>{0});
    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
    try {
        matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2, 3]") != std::string::npos);
        CHECK(msg.find("[4, 5]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient of sum matches central differences") {
    Rng rng(1);
    Tensor a = randn({3, 4}, rng, 1.0, true), b = randn({4, 2}, rng, 1.0, true);
    CHECK(check([&] { return sum(matmul(a, b)); }, {a, b}) < 1e-6);
}

TEST_CASE("matmul batches and broadcasts a plain matrix") {
    Rng rng(2);
    Tensor a = randn({2, 3, 4}, rng, 1.0, true), w = randn({4, 5}, rng, 1.0, true);
    Tensor v = randn({3, 4}, rng, 1.0, true), bb = randn({2, 4, 2}, rng, 1.0, true);
    CHECK(matmul(a, w).shape() == Shape{2, 3, 5});
    CHECK(matmul(v, bb).shape() == Shape{2, 3, 2});
    // batch entry 1 equals the plain product of its slices
    const Tensor full = matmul(a, w);
    const Tensor one = matmul(reshape(slice_rows(a, 1, 2), {3, 4}), w);
    CHECK(test::max_abs_diff(full.data().subspan(15, 15), one.data()) == 0.0);
    CHECK(check([&] { return readout(matmul(a, w)); }, {a, w}) < 1e-6);
    CHECK(check([&] { return readout(matmul(v, bb)); }, {v, bb}) < 1e-6);
}

TEST_CASE("softmax examples and row sums") {
    CHECK(test::values(softmax(Tensor::from({2}, {0, 0}))) == std::vector<double>{0.5, 0.5});
    const auto big = test::values(softmax(Tensor::from({3}, {1000, 1000, 1000})));
    for (double p : big) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const auto p = test::values(softmax(randn({5}, rng, 3.0)));
        double s = 0.0;
        for (double v : p) {
            CHECK(v >= 0.0);
            s += v;
        }
        CHECK(std::abs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("softmax over a non-last axis") {
    Rng rng(4);
    Tensor x = randn({3, 4, 2}, rng, 1.0, true);
    const Tensor y = softmax(x, 1);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 2; ++k) {
            double s = 0.0;
            for (std::size_t j = 0; j < 4; ++j) s += y[(i * 4 + j) * 2 + k];
            CHECK(std::abs(s - 1.0) < 1e-12);
        }
    CHECK(check([&] { return readout(softmax(x, 1)); }, {x}) < 1e-6);
    CHECK_THROWS_AS(softmax(x, 3), DimensionError);
}

TEST_CASE("layer_norm examples") {
    const Tensor g = Tensor::full({4}, 1.0), b = Tensor::zeros({4});
    CHECK(test::values(layer_norm(Tensor::full({1, 4}, 3.5), g, b)) == std::vector<double>(4, 0.0));
    const auto y = test::values(layer_norm(Tensor::from({1, 2}, {1, -1}), Tensor::full({2}, 1.0), Tensor::zeros({2})));
    CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(y[1] == doctest::Approx(-1.0).epsilon(1e-12));

    Rng rng(5);
    const Tensor gain = randn({6}, rng), bias = randn({6}, rng);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = randn({3, 6}, rng);
        const Tensor y1 = layer_norm(x, gain, bias);
        const Tensor y2 = layer_norm(scale(x, 7.3), gain, bias);
        CHECK(test::max_abs_diff(y1.data(), y2.data()) < 1e-9);
    }
    CHECK_THROWS_AS(layer_norm(Tensor::zeros({2, 3}), g, b), DimensionError);
}

TEST_CASE("cross_entropy examples") {
    const std::vector<int> t0{2};
    CHECK(cross_entropy(Tensor::zeros({1, 4}), t0, -1).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    CHECK(cross_entropy(Tensor::from({1, 4}, {0, 0, 1e6, 0}), t0, -1).item() < 1e-12);

    Tensor logits = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    const std::vector<int> ignored{-1, -1};
    const Tensor loss = cross_entropy(logits, ignored, -1);
    CHECK(loss.item() == 0.0);
    backward(loss);
    for (double g : logits.grad()) CHECK(g == 0.0);

    const std::vector<int> bad{0, 3};
    CHECK_THROWS_AS(cross_entropy(logits, bad, -1), IndexError);
}

TEST_CASE("softmax plus cross_entropy gradient") {
    Rng rng(6);
    Tensor x = randn({4, 5}, rng, 1.0, true);
    const std::vector<int> t{1, 3, -1, 0};
    CHECK(check([&] { return cross_entropy(matmul(softmax(x, 0), transpose_last(x)), t, -1); }, {x}) < 1e-6);
    CHECK(check([&] { return cross_entropy(x, std::vector<int>{1, 4, -1, 0}, -1); }, {x}) < 1e-6);
}

TEST_CASE("backward examples") {
    Rng rng(7);
    Tensor x = randn({2, 3, 2}, rng, 1.0, true);
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);

    Tensor s = Tensor::scalar(3.0, true);
    backward(mul(s, s));
    CHECK(s.grad()[0] == 6.0);

    CHECK_THROWS_AS(backward(mul(x, x)), ContractError);
    CHECK_THROWS_AS(backward(sum(Tensor::zeros({2}))), ContractError);
}

TEST_CASE("tape records each operation once in execution order") {
    Tensor x = Tensor::from({2}, {1.5, -2.0}, true);
    const Tensor y = mul(x, x);
    const Tensor loss = sum(add(y, y));  // y reached along two paths
    const Tape tape = Tape::record(loss);
    std::set<Node*> unique(tape.operations().begin(), tape.operations().end());
    CHECK(unique.size() == tape.size());
    for (std::size_t i = 1; i < tape.size(); ++i) CHECK(tape.operations()[i - 1]->seq < tape.operations()[i]->seq);
    backward(loss);
    CHECK(x.grad()[0] == 4 * 1.5);
    CHECK(x.grad()[1] == 4 * -2.0);
}

TEST_CASE("frozen tensors are untouched by backward") {
    Rng rng(8);
    Tensor w = randn({3, 3}, rng);  // frozen
    Tensor x = randn({2, 3}, rng, 1.0, true);
    const auto before = test::values(w);
    backward(sum(gelu(matmul(x, w))));
    CHECK_FALSE(w.has_grad());
    CHECK(test::bitwise_equal(before, w.data()));
    CHECK(x.has_grad());
}

TEST_CASE("finite_diff_check examples") {
    Rng rng(9);
    Tensor x = randn({4, 3}, rng, 1.0, true);
    CHECK(check([&] { return sum(mul(x, x)); }, {x}) < 1e-8);
    Tensor frozen = randn({2}, rng);
    std::vector<Tensor> params{frozen};
    CHECK_THROWS_AS(finite_diff_check([&] { return sum(mul(x, frozen)); }, params), ContractError);
}

TEST_CASE("every differentiable op matches central differences") {
    // property sweep over random small inputs, several seeds
    for (std::uint64_t seed = 10; seed < 16; ++seed) {
        Rng rng(seed);
        Tensor a = randn({2, 3, 4}, rng, 1.0, true), b = randn({3, 4}, rng, 1.0, true);
        Tensor c = randn({2, 3, 4}, rng, 1.0, true);
        Tensor w = randn({4, 5}, rng, 1.0, true), bias = randn({5}, rng, 1.0, true);
        Tensor gain = randn({4}, rng, 1.0, true), shift = randn({4}, rng, 1.0, true);
        Tensor table = randn({6, 4}, rng, 1.0, true);
        const std::vector<int> ids{5, 0, 5, 2};
        const std::vector<std::vector<RowTerm>> terms{{{0, 0.25}, {3, 0.75}}, {{1, 1.0}}, {{2, 0.5}, {0, 0.5}}};

        CAPTURE(seed);
        CHECK(check([&] { return readout(add(a, b)); }, {a, b}) < 1e-4);
        CHECK(check([&] { return readout(sub(a, c)); }, {a, c}) < 1e-4);
        CHECK(check([&] { return readout(mul(a, b)); }, {a, b}) < 1e-4);
        CHECK(check([&] { return readout(scale(a, -1.7)); }, {a}) < 1e-4);
        CHECK(check([&] { return mean(mul(a, c)); }, {a, c}) < 1e-4);
        CHECK(check([&] { return readout(transpose_last(a)); }, {a}) < 1e-4);
        CHECK(check([&] { return readout(permute(a, {2, 0, 1})); }, {a}) < 1e-4);
        CHECK(check([&] { return readout(reshape(a, {6, 4})); }, {a}) < 1e-4);
        CHECK(check([&] { return readout(softmax(a, -1)); }, {a}) < 1e-4);
        CHECK(check([&] { return readout(layer_norm(a, gain, shift)); }, {a, gain, shift}) < 1e-4);
        CHECK(check([&] { return readout(gelu(a)); }, {a}) < 1e-4);
        CHECK(check([&] { return readout(linear(a, w, bias)); }, {a, w, bias}) < 1e-4);
        CHECK(check([&] { return mse_loss(a, c); }, {a, c}) < 1e-4);
        CHECK(check([&] { return readout(embedding(table, ids)); }, {table}) < 1e-4);
        CHECK(check([&] {
                  const std::vector<Tensor> parts{b, reshape(a, {6, 4})};
                  return readout(concat_rows(parts));
              },
                    {a, b}) < 1e-4);
        CHECK(check([&] { return readout(slice_rows(a, 1, 2)); }, {a}) < 1e-4);
        CHECK(check([&] { return readout(combine_rows(table, terms)); }, {table}) < 1e-4);
    }
}

TEST_CASE("attention module gradient and causal mask") {
    Rng rng(20);
    const nn::SelfAttention attn = nn::SelfAttention::create(8, 2, rng, 0.5);
    Tensor x = randn({2, 5, 8}, rng, 1.0, true);
    nn::ParameterList params;
    attn.collect(params, "attn");
    std::vector<Tensor> tensors{x};
    for (auto& p : params) tensors.push_back(p.value);
    const Tensor mask = nn::causal_mask(5);
    nn::AttentionOptions opts;
    opts.mask = &mask;
    CHECK(check([&] { return readout(attn(x, opts).out); }, tensors) < 1e-4);

    // perturbing a later position leaves earlier outputs unchanged
    const Tensor y1 = attn(x.detach(), opts).out;
    auto moved = test::values(x);
    for (std::size_t j = 0; j < 8; ++j) moved[4 * 8 + j] += 1.0;
    const Tensor y2 = attn(Tensor::from({2, 5, 8}, moved), opts).out;
    CHECK(test::max_abs_diff(y1.data().subspan(0, 32), y2.data().subspan(0, 32)) == 0.0);
    CHECK(test::max_abs_diff(y1.data().subspan(32, 8), y2.data().subspan(32, 8)) > 0.0);
}

TEST_CASE("shape and index errors") {
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
    CHECK_THROWS_AS(Tensor::zeros({0, 2}), DimensionError);
    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({2})), DimensionError);
    CHECK_THROWS_AS(reshape(Tensor::zeros({2, 3}), {4}), DimensionError);
    CHECK_THROWS_AS(permute(Tensor::zeros({2, 3}), {0, 0}), DimensionError);
    const std::vector<int> ids{7};
    CHECK_THROWS_AS(embedding(Tensor::zeros({3, 2}), ids), IndexError);
    CHECK_THROWS_AS(slice_rows(Tensor::zeros({3, 2}), 2, 4), DimensionError);
}
