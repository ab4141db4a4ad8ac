// SPDX-License-Identifier: Apache-2.0
#include "evl/tokmerge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "evl/ops.hpp"
#include "evl/random.hpp"

namespace evl::tokmerge {

Partition partition_tokens(std::span<const std::size_t> candidates, PartitionPolicy policy, std::uint64_t seed) {
    if (candidates.size() < 2) {
        throw DimensionError("partition needs at least 2 tokens, got " + std::to_string(candidates.size()));
    }
    std::vector<std::size_t> order(candidates.begin(), candidates.end());
    if (policy == PartitionPolicy::seeded_random) {
        Rng rng(seed);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    }
    Partition p;
    for (std::size_t i = 0; i < order.size(); ++i) (i % 2 == 0 ? p.a : p.b).push_back(order[i]);
    std::sort(p.a.begin(), p.a.end());
    std::sort(p.b.begin(), p.b.end());
    return p;
}

Partition partition(std::size_t count, PartitionPolicy policy, std::uint64_t seed) {
    std::vector<std::size_t> all(count);
    std::iota(all.begin(), all.end(), 0);
    return partition_tokens(all, policy, seed);
}

SimilarityMatrix key_similarity(const Tensor& keys, const Partition& part) {
    if (keys.rank() != 3) throw DimensionError("key_similarity expects keys [H, L, d], got " + to_string(keys.shape()));
    const std::size_t heads = keys.dim(0), len = keys.dim(1), d = keys.dim(2);
    const auto kd = keys.data();

    // head mean, then unit-normalize each token (zero vectors stay zero)
    std::vector<double> unit(len * d, 0.0);
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < len * d; ++i) unit[i] += kd[h * len * d + i];
    for (std::size_t t = 0; t < len; ++t) {
        double norm = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            unit[t * d + c] /= static_cast<double>(heads);
            norm += unit[t * d + c] * unit[t * d + c];
        }
        norm = std::sqrt(norm);
        for (std::size_t c = 0; c < d; ++c) unit[t * d + c] = norm > 0.0 ? unit[t * d + c] / norm : 0.0;
    }

    SimilarityMatrix sim{part.a.size(), part.b.size(), std::vector<double>(part.a.size() * part.b.size())};
    for (std::size_t i = 0; i < part.a.size(); ++i) {
        for (std::size_t j = 0; j < part.b.size(); ++j) {
            const double* ua = unit.data() + part.a[i] * d;
            const double* ub = unit.data() + part.b[j] * d;
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) dot += ua[c] * ub[c];
            sim.values[i * sim.cols + j] = dot;
        }
    }
    return sim;
}

MergePlan bipartite_soft_match(const Tensor& keys, int r, std::span<const std::size_t> protected_tokens,
                               const MatchOptions& options) {
    if (r < 0) throw ContractError("merge quota r must be non-negative, got " + std::to_string(r));
    if (keys.rank() != 3) throw DimensionError("bipartite_soft_match expects keys [H, L, d], got " + to_string(keys.shape()));

    MergePlan plan;
    plan.token_count = keys.dim(1);
    plan.protected_tokens.assign(protected_tokens.begin(), protected_tokens.end());
    std::sort(plan.protected_tokens.begin(), plan.protected_tokens.end());

    std::vector<std::size_t> candidates;
    for (std::size_t t = 0; t < plan.token_count; ++t) {
        if (!std::binary_search(plan.protected_tokens.begin(), plan.protected_tokens.end(), t)) candidates.push_back(t);
    }
    const MergeSchedule clamp{r, 1};
    const std::size_t quota = clamp.quota(candidates.size());
    if (candidates.size() < 2) return plan;

    plan.partition = partition_tokens(candidates, options.policy, options.seed);
    const SimilarityMatrix sim = key_similarity(keys, plan.partition);
    for (std::size_t i = 0; i < sim.rows; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < sim.cols; ++j) {
            if (sim.at(i, j) > sim.at(i, best)) best = j;
        }
        plan.links.push_back({plan.partition.a[i], plan.partition.b[best], sim.at(i, best)});
    }

    plan.kept = plan.links;
    std::stable_sort(plan.kept.begin(), plan.kept.end(), [](const Link& x, const Link& y) {
        if (x.similarity != y.similarity) return x.similarity > y.similarity;
        if (x.source != y.source) return x.source < y.source;
        return x.destination < y.destination;
    });
    plan.kept.resize(quota);
    return plan;
}

TokenBatch TokenBatch::fresh(Tensor tokens) {
    TokenBatch b;
    const std::size_t n = tokens.dim(0);
    b.tokens = std::move(tokens);
    b.sizes.assign(n, 1);
    b.groups.resize(n);
    for (std::size_t i = 0; i < n; ++i) b.groups[i] = {i};
    return b;
}

TokenBatch apply_merge(const TokenBatch& batch, const MergePlan& plan) {
    if (batch.count() != plan.token_count) {
        throw DimensionError("apply_merge: plan built for " + std::to_string(plan.token_count) + " tokens, batch has " +
                             std::to_string(batch.count()));
    }
    if (plan.kept.empty()) return batch;

    const std::size_t n = batch.count();
    std::vector<std::vector<std::size_t>> folded(n);  // destination -> sources
    std::vector<bool> consumed(n, false);
    for (const auto& link : plan.kept) {
        folded[link.destination].push_back(link.source);
        consumed[link.source] = true;
    }

    std::vector<std::size_t> order = plan.protected_tokens;
    order.insert(order.end(), plan.partition.b.begin(), plan.partition.b.end());
    for (auto a : plan.partition.a) {
        if (!consumed[a]) order.push_back(a);
    }

    TokenBatch out;
    std::vector<std::vector<RowTerm>> terms;
    terms.reserve(order.size());
    for (auto t : order) {
        std::vector<std::size_t> members{t};
        std::sort(folded[t].begin(), folded[t].end());
        members.insert(members.end(), folded[t].begin(), folded[t].end());

        std::size_t total = 0;
        for (auto m : members) total += batch.sizes[m];
        std::vector<RowTerm> row;
        std::vector<std::size_t> group;
        for (auto m : members) {
            row.push_back({m, static_cast<double>(batch.sizes[m]) / static_cast<double>(total)});
            group.insert(group.end(), batch.groups[m].begin(), batch.groups[m].end());
        }
        std::sort(group.begin(), group.end());
        terms.push_back(std::move(row));
        out.sizes.push_back(total);
        out.groups.push_back(std::move(group));
    }
    out.tokens = combine_rows(batch.tokens, terms);
    return out;
}

std::size_t MergeSchedule::quota(std::size_t incoming) const {
    if (r < 0) throw ContractError("merge quota r must be non-negative, got " + std::to_string(r));
    return std::min(static_cast<std::size_t>(r), incoming / 2);
}

std::vector<std::size_t> schedule_counts(std::size_t initial, const MergeSchedule& schedule) {
    if (initial < 1) throw ContractError("schedule_counts needs at least one token");
    std::vector<std::size_t> counts{initial};
    for (std::size_t l = 0; l < schedule.num_layers; ++l) counts.push_back(counts.back() - schedule.quota(counts.back()));
    return counts;
}

bool is_partition(const std::vector<std::vector<std::size_t>>& groups, std::size_t total) {
    std::vector<bool> seen(total, false);
    std::size_t covered = 0;
    for (const auto& g : groups) {
        if (g.empty()) return false;
        for (auto i : g) {
            if (i >= total || seen[i]) return false;
            seen[i] = true;
            ++covered;
        }
    }
    return covered == total;
}

}  // namespace evl::tokmerge
