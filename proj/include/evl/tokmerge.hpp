// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "evl/tensor.hpp"

// Bipartite soft matching: split tokens into sets A and B, link every A token
// to its most similar B token by head-averaged key cosine similarity, keep the
// r strongest links and fold each kept source into its destination with a
// size-weighted mean.
namespace evl::tokmerge {

enum class PartitionPolicy { alternating, seeded_random };

struct Partition {
    std::vector<std::size_t> a;  // ascending token indices
    std::vector<std::size_t> b;  // ascending token indices
};

// Splits 0..count-1. Alternating puts even positions in A and odd ones in B;
// seeded_random shuffles first and gives A the same ceil(count/2) share.
Partition partition(std::size_t count, PartitionPolicy policy = PartitionPolicy::alternating,
                    std::uint64_t seed = 0);

// Same split applied to an explicit candidate list (positions within the list
// decide the side, values are token indices).
Partition partition_tokens(std::span<const std::size_t> candidates, PartitionPolicy policy, std::uint64_t seed);

struct SimilarityMatrix {
    std::size_t rows = 0;  // |A|
    std::size_t cols = 0;  // |B|
    std::vector<double> values;
    double at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

// keys: [H, L, d_h]. Keys are averaged over heads, then cosine similarity is
// taken between every A and B token. A zero-norm key has similarity 0 to all.
SimilarityMatrix key_similarity(const Tensor& keys, const Partition& part);

struct Link {
    std::size_t source;       // token index in A
    std::size_t destination;  // token index in B
    double similarity;
};

struct MergePlan {
    std::size_t token_count = 0;
    std::vector<std::size_t> protected_tokens;  // ascending
    Partition partition;
    std::vector<Link> links;  // one per A token, in A order
    std::vector<Link> kept;   // strongest links, best first
};

struct MatchOptions {
    PartitionPolicy policy = PartitionPolicy::alternating;
    std::uint64_t seed = 0;
};

// Keeps min(r, floor(n / 2)) links, n being the unprotected token count.
// Ties: higher similarity first, then lower source, then lower destination.
MergePlan bipartite_soft_match(const Tensor& keys, int r, std::span<const std::size_t> protected_tokens = {},
                               const MatchOptions& options = {});

struct TokenBatch {
    Tensor tokens;                                // [L, D]
    std::vector<std::size_t> sizes;               // original patches per token
    std::vector<std::vector<std::size_t>> groups;  // original patch indices, ascending

    // Every token stands for itself: sizes 1, groups {i}.
    static TokenBatch fresh(Tensor tokens);
    std::size_t count() const { return sizes.size(); }
};

// Output order: protected tokens, then B tokens, then surviving A tokens, each
// in ascending original order. A plan with no kept links returns the batch
// unchanged.
TokenBatch apply_merge(const TokenBatch& batch, const MergePlan& plan);

struct MergeSchedule {
    int r = 19;
    std::size_t num_layers = 12;

    // Tokens removed at a layer that receives `incoming` mergeable tokens.
    std::size_t quota(std::size_t incoming) const;
};

// Token count before the first layer and after each layer (num_layers + 1 entries).
std::vector<std::size_t> schedule_counts(std::size_t initial, const MergeSchedule& schedule);

// Groups are disjoint, nonempty and cover 0..total-1 exactly.
bool is_partition(const std::vector<std::vector<std::size_t>>& groups, std::size_t total);

}  // namespace evl::tokmerge
