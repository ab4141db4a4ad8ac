// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "evl/costmodel.hpp"

using namespace evl;
using namespace evl::costmodel;

namespace {

connector::TomeFormerConfig paper_connector(std::size_t layers = 12, int r = 19) {
    connector::TomeFormerConfig c;
    c.num_layers = layers;
    c.model_dim = 768;
    c.num_heads = 12;
    c.schedule = {r, layers};
    return c;
}

// Closed form written out per layer: 4 L D^2 + 2 L^2 D + 8 L' D^2.
std::uint64_t tomeformer_oracle(std::uint64_t l0, std::uint64_t d, std::uint64_t r, std::uint64_t layers) {
    std::uint64_t total = 0, l = l0;
    for (std::uint64_t i = 0; i < layers; ++i) {
        const std::uint64_t out = l - std::min(r, l / 2);
        total += 4 * l * d * d + 2 * l * l * d + 8 * out * d * d;
        l = out;
    }
    return total;
}

}  // namespace

TEST_CASE("linear map and hand-summed layer") {
    CHECK(macs_linear(2, 4, 4) == 32);
    LayerSpec s;
    s.model_dim = 4;
    s.num_heads = 1;
    s.seq_len_in = 1;
    s.seq_len_out = 1;
    const auto m = macs_transformer_layer(s);
    CHECK(m.qkv == 48);
    CHECK(m.scores == 4);
    CHECK(m.values == 4);
    CHECK(m.out_proj == 16);
    CHECK(m.mlp == 128);
    CHECK(m.total() == 200);
}

TEST_CASE("layer scaling laws") {
    LayerSpec a;
    a.seq_len_in = a.seq_len_out = 50;
    LayerSpec b = a;
    b.seq_len_in = b.seq_len_out = 100;
    const auto ma = macs_transformer_layer(a), mb = macs_transformer_layer(b);
    CHECK(mb.qkv == 2 * ma.qkv);
    CHECK(mb.out_proj == 2 * ma.out_proj);
    CHECK(mb.mlp == 2 * ma.mlp);
    CHECK(mb.scores == 4 * ma.scores);
    CHECK(mb.values == 4 * ma.values);

    LayerSpec bad = a;
    bad.seq_len_out = 51;
    CHECK_THROWS_AS(bad.validate(), ContractError);
    CHECK_THROWS_AS(macs_transformer_layer(bad), ContractError);
}

TEST_CASE("cross-attention and cached keys") {
    LayerSpec s;
    s.model_dim = 8;
    s.num_heads = 2;
    s.seq_len_in = s.seq_len_out = 3;
    s.cached_len = 5;
    s.cross = CrossAttention{7, 16, 2};
    const auto m = macs_transformer_layer(s);
    CHECK(m.scores == 3 * 8 * 8);  // 3 rows over 3 + 5 keys
    CHECK(m.values == 3 * 8 * 8);
    // query map for 2 rows, key/value maps for 7 tokens of width 16, scores and values, output map
    CHECK(m.cross == 2 * 8 * 8 + 2 * 7 * 16 * 8 + 2 * 2 * 7 * 8 + 2 * 8 * 8);
}

TEST_CASE("tomeformer totals") {
    const auto report = macs_tomeformer(paper_connector(), 256);
    CHECK(report.total_macs() == tomeformer_oracle(256, 768, 19, 12));
    CHECK(report.flops() == 2 * report.total_macs());
    CHECK(report.layers.size() == 12);
    std::uint64_t sum = 0;
    for (const auto& e : report.layers) sum += e.macs;
    CHECK(sum == report.total_macs());
    CHECK(std::abs(static_cast<double>(report.total_macs()) / 11.9e9 - 1.0) < 0.15);

    const auto half = macs_tomeformer(paper_connector(6, 38), 256);
    CHECK(half.total_macs() == tomeformer_oracle(256, 768, 38, 6));
    CHECK(std::abs(static_cast<double>(half.total_macs()) / 5.6e9 - 1.0) < 0.15);

    CHECK(macs_tomeformer(paper_connector(12, 19), 256).total_macs() <
          macs_tomeformer(paper_connector(12, 0), 256).total_macs());

    const auto with_proj = macs_tomeformer(paper_connector(), 256, ProjectionDims{1408, 2560});
    CHECK(with_proj.total_macs() == report.total_macs() + 256ull * 1408 * 768 + 28ull * 768 * 2560);
    CHECK(report.convention == kConvention);
    CHECK(report.to_tsv().find("layer0") != std::string::npos);
}

TEST_CASE("protected token adds one never-merged row") {
    auto c = paper_connector();
    c.include_protected_token = true;
    const auto with = macs_tomeformer(c, 256);
    const auto without = macs_tomeformer(paper_connector(), 256);
    CHECK(with.total_macs() > without.total_macs());
}

TEST_CASE("q-former totals") {
    const QFormerConfig q;
    const auto s2 = macs_qformer(q, 2);
    CHECK(std::abs(static_cast<double>(s2.total_macs()) / 6.28e9 - 1.0) < 0.15);
    const auto s1 = macs_qformer(q, 1);
    CHECK(std::abs(static_cast<double>(s1.total_macs()) / 36.7e9 - 1.0) < 0.15);
    REQUIRE(s1.sections.size() == 3);
    std::uint64_t sections = 0, biggest = 0;
    for (const auto& e : s1.sections) {
        sections += e.macs;
        biggest = std::max(biggest, e.macs);
    }
    CHECK(sections == s1.total_macs());
    CHECK(std::abs(static_cast<double>(biggest) / 27.0e9 - 1.0) < 0.15);

    QFormerConfig none = q;
    none.num_layers = 0;
    CHECK(macs_qformer(none, 2).total_macs() == 0);
    CHECK_THROWS_AS(macs_qformer(q, 3), ConfigError);
}

TEST_CASE("ablation over r") {
    const auto rows = ablate_r(paper_connector(), 256, {10, 13, 16, 19, 22, 25});
    REQUIRE(rows.size() == 6);
    for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].macs < rows[i - 1].macs);
    CHECK(rows[0].final_tokens == 136);
    CHECK(rows[1].final_tokens == 100);
    CHECK(rows[2].final_tokens == 64);
    CHECK(rows[3].final_tokens == 28);
    for (const auto& row : rows) {
        CHECK(row.final_tokens >= 1);
        CHECK(row.final_tokens == tokmerge::schedule_counts(256, {row.r, 12}).back());
    }
    CHECK_THROWS_AS(ablate_r(paper_connector(), 256, {}), ContractError);
    CHECK_THROWS_AS(ablate_r(paper_connector(), 256, {-1}), ContractError);

    // strictly decreasing over every r in 0..40 as well
    std::uint64_t prev = UINT64_MAX;
    for (int r = 0; r <= 40; ++r) {
        const auto total = macs_tomeformer(paper_connector(12, r), 256).total_macs();
        CHECK(total < prev);
        prev = total;
    }
}
