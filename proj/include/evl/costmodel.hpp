// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "evl/connector.hpp"

// Analytical multiply-accumulate counts for transformer connectors. One MAC is
// one multiply plus one add; FLOPs are reported as exactly twice the MACs.
namespace evl::costmodel {

inline constexpr const char* kConvention =
    "MACs of linear maps (rows * d_in * d_out), attention scores and attention-weighted values "
    "(queries * keys * model_dim each) and MLP maps; layer norms, softmax, activations, biases and "
    "residual adds are excluded; FLOPs = 2 * MACs";

struct CrossAttention {
    std::size_t context_len = 0;  // encoder tokens attended to
    std::size_t context_dim = 0;  // their width before the key/value maps
    std::size_t query_rows = 0;   // rows that cross-attend; 0 means all seq_len_in rows
};

struct LayerSpec {
    std::size_t model_dim = 768;
    std::size_t num_heads = 12;
    std::size_t mlp_ratio = 4;
    std::size_t seq_len_in = 0;
    std::size_t seq_len_out = 0;  // rows entering the MLP (after merging)
    // Keys/values already computed elsewhere (a cache) that the rows also attend to.
    std::size_t cached_len = 0;
    std::optional<CrossAttention> cross;

    void validate() const;
};

struct LayerMacs {
    std::uint64_t qkv = 0;
    std::uint64_t scores = 0;
    std::uint64_t values = 0;
    std::uint64_t out_proj = 0;
    std::uint64_t cross = 0;
    std::uint64_t mlp = 0;

    std::uint64_t total() const { return qkv + scores + values + out_proj + cross + mlp; }
};

std::uint64_t macs_linear(std::size_t rows, std::size_t d_in, std::size_t d_out);
LayerMacs macs_transformer_layer(const LayerSpec& spec);

struct CostEntry {
    std::string label;
    std::uint64_t macs = 0;
};

struct CostReport {
    std::string model;
    std::vector<CostEntry> layers;    // every counted unit; these sum to the total
    std::vector<CostEntry> sections;  // coarser subtotals (passes), informational
    std::string convention = kConvention;

    std::uint64_t total_macs() const;
    std::uint64_t flops() const { return 2 * total_macs(); }
    std::string to_tsv() const;
};

struct ProjectionDims {
    std::size_t encoder_dim = 0;
    std::size_t decoder_dim = 0;
};

// Attention and its projections run on the pre-merge count, the MLP on the
// post-merge count. Projections are counted only when dims are given.
CostReport macs_tomeformer(const connector::TomeFormerConfig& config, std::size_t initial_tokens,
                           std::optional<ProjectionDims> projections = std::nullopt);

struct QFormerConfig {
    std::size_t queries = 32;
    std::size_t image_tokens = 257;
    std::size_t image_dim = 1408;
    std::size_t num_layers = 12;
    std::size_t model_dim = 768;
    std::size_t num_heads = 12;
    std::size_t mlp_ratio = 4;
    std::size_t cross_cadence = 2;  // cross-attention in layers where index % cadence == 0
    std::size_t text_len = 32;
    std::size_t vocab_size = 30522;
    std::size_t hard_negatives = 2;  // extra image-text pairs scored per positive
};

// Stage 2: queries cross-attending the image once. Stage 1: contrastive
// (query pass + text-only pass), matching (queries and text jointly, one
// positive plus hard negatives) and captioning (text attending cached query
// keys/values, then the vocabulary head). Section labels name the passes.
CostReport macs_qformer(const QFormerConfig& config, int stage);

struct AblationRow {
    int r = 0;
    std::uint64_t macs = 0;
    std::size_t final_tokens = 0;
};

std::vector<AblationRow> ablate_r(const connector::TomeFormerConfig& config, std::size_t initial_tokens,
                                  const std::vector<int>& r_list);

}  // namespace evl::costmodel
