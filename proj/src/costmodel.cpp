// SPDX-License-Identifier: Apache-2.0
#include "evl/costmodel.hpp"

#include <sstream>

namespace evl::costmodel {

void LayerSpec::validate() const {
    if (seq_len_out > seq_len_in) {
        throw ContractError("layer spec: seq_len_out " + std::to_string(seq_len_out) + " exceeds seq_len_in " +
                            std::to_string(seq_len_in));
    }
    if (num_heads == 0 || model_dim % num_heads != 0) throw ConfigError("layer spec: model_dim not divisible by heads");
    if (cross && cross->query_rows > seq_len_in) throw ContractError("layer spec: more cross-attending rows than rows");
}

std::uint64_t macs_linear(std::size_t rows, std::size_t d_in, std::size_t d_out) {
    return static_cast<std::uint64_t>(rows) * d_in * d_out;
}

LayerMacs macs_transformer_layer(const LayerSpec& spec) {
    spec.validate();
    const std::uint64_t l = spec.seq_len_in, d = spec.model_dim, keys = l + spec.cached_len;
    LayerMacs m;
    m.qkv = 3 * macs_linear(l, d, d);
    m.scores = l * keys * d;
    m.values = l * keys * d;
    m.out_proj = macs_linear(l, d, d);
    if (spec.cross) {
        const std::uint64_t q = spec.cross->query_rows ? spec.cross->query_rows : l;
        const std::uint64_t c = spec.cross->context_len;
        m.cross = macs_linear(q, d, d) + 2 * macs_linear(c, spec.cross->context_dim, d) + 2 * q * c * d +
                  macs_linear(q, d, d);
    }
    m.mlp = 2 * macs_linear(spec.seq_len_out, d, d * spec.mlp_ratio);
    return m;
}

std::uint64_t CostReport::total_macs() const {
    std::uint64_t t = 0;
    for (const auto& e : layers) t += e.macs;
    return t;
}

std::string CostReport::to_tsv() const {
    std::ostringstream os;
    os << "# " << model << '\n' << "# " << convention << '\n';
    os << "unit\tmacs\tflops\n";
    for (const auto& e : layers) os << e.label << '\t' << e.macs << '\t' << 2 * e.macs << '\n';
    for (const auto& e : sections) os << "section:" << e.label << '\t' << e.macs << '\t' << 2 * e.macs << '\n';
    os << "total\t" << total_macs() << '\t' << flops() << '\n';
    return os.str();
}

CostReport macs_tomeformer(const connector::TomeFormerConfig& config, std::size_t initial_tokens,
                           std::optional<ProjectionDims> projections) {
    CostReport report;
    report.model = "tomeformer";
    const std::size_t extra = config.include_protected_token ? 1 : 0;
    const auto counts = tokmerge::schedule_counts(initial_tokens, config.schedule);
    if (projections) {
        report.layers.push_back(
            {"proj_in", macs_linear(initial_tokens + extra, projections->encoder_dim, config.model_dim)});
    }
    for (std::size_t i = 0; i < config.num_layers; ++i) {
        LayerSpec spec{config.model_dim, config.num_heads, config.mlp_ratio, counts[i] + extra, counts[i + 1] + extra,
                       0, std::nullopt};
        report.layers.push_back({"layer" + std::to_string(i), macs_transformer_layer(spec).total()});
    }
    if (projections) {
        report.layers.push_back(
            {"proj_out", macs_linear(counts.back() + extra, config.model_dim, projections->decoder_dim)});
    }
    return report;
}

namespace {

LayerSpec qformer_layer(const QFormerConfig& c, std::size_t rows, std::size_t cached, std::size_t layer,
                        std::size_t cross_rows) {
    LayerSpec spec{c.model_dim, c.num_heads, c.mlp_ratio, rows, rows, cached, std::nullopt};
    if (cross_rows > 0 && c.cross_cadence > 0 && layer % c.cross_cadence == 0) {
        spec.cross = CrossAttention{c.image_tokens, c.image_dim, cross_rows};
    }
    return spec;
}

// Appends one pass over the stack and returns its total.
std::uint64_t add_pass(CostReport& report, const QFormerConfig& c, const std::string& label, std::size_t rows,
                       std::size_t cached, std::size_t cross_rows, std::size_t replicas = 1) {
    std::uint64_t total = 0;
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        const std::uint64_t macs = replicas * macs_transformer_layer(qformer_layer(c, rows, cached, l, cross_rows)).total();
        report.layers.push_back({label + ".layer" + std::to_string(l), macs});
        total += macs;
    }
    return total;
}

}  // namespace

CostReport macs_qformer(const QFormerConfig& c, int stage) {
    CostReport report;
    report.model = "qformer.stage" + std::to_string(stage);
    if (stage == 2) {
        report.sections.push_back({"generative", add_pass(report, c, "generative", c.queries, 0, c.queries)});
        return report;
    }
    if (stage != 1) throw ConfigError("Q-Former stage must be 1 or 2, got " + std::to_string(stage));

    std::uint64_t contrastive = add_pass(report, c, "contrastive.image", c.queries, 0, c.queries);
    contrastive += add_pass(report, c, "contrastive.text", c.text_len, 0, 0);
    report.sections.push_back({"contrastive", contrastive});

    report.sections.push_back(
        {"matching", add_pass(report, c, "matching", c.queries + c.text_len, 0, c.queries, 1 + c.hard_negatives)});

    std::uint64_t caption = c.num_layers ? add_pass(report, c, "caption", c.text_len, c.queries, 0) : 0;
    if (c.num_layers) {
        const std::uint64_t head = macs_linear(c.text_len, c.model_dim, c.model_dim) +
                                   macs_linear(c.text_len, c.model_dim, c.vocab_size);
        report.layers.push_back({"caption.head", head});
        caption += head;
    }
    report.sections.push_back({"caption", caption});
    return report;
}

std::vector<AblationRow> ablate_r(const connector::TomeFormerConfig& config, std::size_t initial_tokens,
                                  const std::vector<int>& r_list) {
    if (r_list.empty()) throw ContractError("ablate_r: empty r list");
    std::vector<AblationRow> rows;
    for (int r : r_list) {
        if (r < 0) throw ContractError("ablate_r: negative r " + std::to_string(r));
        auto cfg = config;
        cfg.schedule.r = r;
        const auto counts = tokmerge::schedule_counts(initial_tokens, cfg.schedule);
        rows.push_back({r, macs_tomeformer(cfg, initial_tokens).total_macs(), counts.back()});
    }
    return rows;
}

}  // namespace evl::costmodel
