// SPDX-License-Identifier: Apache-2.0
// evlgen: batch commands over the captioning library.
//
// Exit codes: 0 ok, 1 usage or configuration error, 2 data error,
// 3 property failure (temporal-check).
#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "evl/captioner.hpp"
#include "evl/checkpoint.hpp"
#include "evl/config.hpp"
#include "evl/costmodel.hpp"
#include "evl/datagen.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace evl;

namespace {

constexpr int kOk = 0, kUsage = 1, kData = 2, kPropertyFailure = 3;
constexpr int kSchemaVersion = 1;

struct ConfigArgs {
    std::string path;
    std::vector<std::string> overrides;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
    cmd->add_option("--config", args.path, "JSON run configuration");
    cmd->add_option("--set", args.overrides, "override, key.path=value (repeatable)");
}

config::RunConfig resolve(const ConfigArgs& args) {
    config::RunConfig cfg = config::load(args.path, args.overrides);
    std::cerr << "resolved config:\n" << config::dump(cfg) << '\n';
    return cfg;
}

// A .ppm file is one image; a directory holds frame0.ppm, frame1.ppm, ...
Tensor load_input(const fs::path& input) {
    if (!fs::exists(input)) throw ParseError(input.string() + ": no such file or directory");
    std::vector<datagen::Image> frames;
    if (fs::is_directory(input)) {
        for (std::size_t k = 0;; ++k) {
            const fs::path frame = input / ("frame" + std::to_string(k) + ".ppm");
            if (!fs::exists(frame)) break;
            frames.push_back(datagen::read_ppm(frame));
        }
        if (frames.empty()) throw ParseError(input.string() + ": no frame0.ppm");
    } else {
        frames.push_back(datagen::read_ppm(input));
    }
    return datagen::to_pixels(frames);
}

struct LoadedModel {
    config::RunConfig config;
    std::unique_ptr<captioner::CaptionModel> model;
};

LoadedModel load_checkpoint(const fs::path& path) {
    const checkpoint::Checkpoint ckpt = checkpoint::load(path);
    const json doc = json::parse(ckpt.config, nullptr, false);
    if (doc.is_discarded()) throw ParseError(path.string() + ": embedded config is not valid JSON");
    LoadedModel out{config::from_json(doc), nullptr};
    out.model = std::make_unique<captioner::CaptionModel>(out.config.model);
    checkpoint::restore(ckpt, out.model->all_parameters());
    out.model->freeze_backbones();
    return out;
}

json report_json(const costmodel::CostReport& r) {
    json layers = json::array(), sections = json::array();
    for (const auto& e : r.layers) layers.push_back({{"label", e.label}, {"macs", e.macs}, {"flops", 2 * e.macs}});
    for (const auto& e : r.sections) sections.push_back({{"label", e.label}, {"macs", e.macs}, {"flops", 2 * e.macs}});
    return {{"schema_version", kSchemaVersion},
            {"kind", "cost_report"},
            {"model", r.model},
            {"convention", r.convention},
            {"total_macs", r.total_macs()},
            {"total_flops", r.flops()},
            {"layers", layers},
            {"sections", sections}};
}

int cmd_datagen(const fs::path& out, std::size_t n, std::uint64_t seed, std::size_t video) {
    if (n == 0) throw ConfigError("--n must be positive");
    std::vector<datagen::Sample> samples;
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t s = captioner::derive_seed(seed, i);
        auto sample = video > 0 ? datagen::gen_video_sample(s, video) : datagen::gen_image_sample(s);
        sample.id = datagen::format_id(i);
        samples.push_back(std::move(sample));
    }
    datagen::write_corpus(samples, out);
    std::cout << json{{"schema_version", kSchemaVersion}, {"kind", "corpus"}, {"samples", n},
                      {"frames", video > 0 ? video : 1}, {"path", out.string()}}
                     .dump()
              << '\n';
    return kOk;
}

std::vector<captioner::Example> corpus_examples(const fs::path& dir, const datagen::Vocabulary& vocab) {
    const datagen::Corpus corpus = datagen::read_corpus(dir);
    std::vector<captioner::Example> out;
    for (const auto& s : corpus.samples) out.push_back(captioner::make_example(s, vocab));
    return out;
}

int cmd_train(const ConfigArgs& args, const fs::path& data, const fs::path& out, const std::string& eval) {
    const config::RunConfig cfg = resolve(args);
    captioner::CaptionModel model(cfg.model);
    const auto examples = corpus_examples(data, model.vocabulary());
    if (examples.empty()) throw ParseError(data.string() + ": corpus has no samples");

    captioner::pretrain_backbones(model, cfg.pretrain);
    captioner::TrainOptions options;
    options.on_step = [&](const captioner::LogRow& row) {
        if ((row.step + 1) % 100 == 0) {
            std::cerr << "step " << row.step + 1 << "/" << cfg.train.total_steps << " loss " << row.loss << '\n';
        }
    };
    const captioner::TrainingLog log = captioner::train(model, examples, cfg.train, options);
    if (model.truncations() > 0) std::cerr << "warning: " << model.truncations() << " captions truncated\n";

    fs::create_directories(out);
    std::ofstream(out / "log.tsv") << log.to_tsv(true);
    checkpoint::save(out / "model.evlg", checkpoint::capture(model.all_parameters(), config::dump(cfg)));

    char line[64];
    std::snprintf(line, sizeof line, "%.17g", log.rows.back().loss);
    std::cout << "final_loss\t" << line << '\n';
    if (!eval.empty()) {
        const auto held_out = corpus_examples(eval, model.vocabulary());
        std::size_t hits = 0;
        for (const auto& ex : held_out) hits += captioner::describe(model, ex.pixels) == ex.caption ? 1 : 0;
        std::cout << "exact_match\t" << hits << "/" << held_out.size() << '\n';
    }
    return kOk;
}

int cmd_generate(const fs::path& ckpt, const fs::path& input, std::size_t max_len) {
    const LoadedModel loaded = load_checkpoint(ckpt);
    const std::size_t len = max_len ? max_len : loaded.config.model.decoder.caption_context;
    const auto ids = captioner::generate(*loaded.model, load_input(input), len);
    std::cout << loaded.model->vocabulary().decode(ids) << '\n';
    return kOk;
}

int cmd_macs(const ConfigArgs& args, bool qformer, int stage, bool as_json) {
    const config::RunConfig cfg = resolve(args);
    const costmodel::CostReport report = qformer ? costmodel::macs_qformer(cfg.macs.qformer, stage)
                                                 : costmodel::macs_tomeformer(cfg.macs.connector, cfg.macs.initial_tokens);
    if (as_json) {
        std::cout << report_json(report).dump(2) << '\n';
    } else {
        std::cout << report.to_tsv();
    }
    return kOk;
}

int cmd_ablate_r(const ConfigArgs& args, const std::vector<int>& r_list, bool as_json) {
    const config::RunConfig cfg = resolve(args);
    const auto rows = costmodel::ablate_r(cfg.macs.connector, cfg.macs.initial_tokens, r_list);
    if (as_json) {
        json table = json::array();
        for (const auto& r : rows) {
            table.push_back({{"r", r.r}, {"macs", r.macs}, {"flops", 2 * r.macs}, {"final_tokens", r.final_tokens}});
        }
        std::cout << json{{"schema_version", kSchemaVersion}, {"kind", "ablation"},
                          {"initial_tokens", cfg.macs.initial_tokens}, {"rows", table}}
                         .dump(2)
                  << '\n';
    } else {
        std::cout << "r\tmacs\tflops\tfinal_tokens\n";
        for (const auto& r : rows) std::cout << r.r << '\t' << r.macs << '\t' << 2 * r.macs << '\t' << r.final_tokens << '\n';
    }
    return kOk;
}

std::array<std::uint8_t, 3> palette(std::size_t i) {
    return {static_cast<std::uint8_t>(i * 37 % 256), static_cast<std::uint8_t>(i * 101 % 256),
            static_cast<std::uint8_t>(i * 173 % 256)};
}

int cmd_merge_viz(const ConfigArgs& args, const std::string& ckpt, const fs::path& input, const fs::path& out) {
    std::unique_ptr<captioner::CaptionModel> model;
    if (!ckpt.empty()) {
        model = std::move(load_checkpoint(ckpt).model);
    } else {
        model = std::make_unique<captioner::CaptionModel>(resolve(args).model);
    }
    const Tensor pixels = load_input(input);
    if (pixels.dim(1) != 1) throw ParseError(input.string() + ": merge-viz takes a single image");
    NoGradGuard no_grad;
    const auto result = model->prompts(pixels);

    const auto& ec = model->config().encoder;
    const std::size_t side = ec.image_size / ec.patch_size, patches = side * side;
    if (result.batch.groups.size() > 256) throw ConfigError("merge-viz palette covers at most 256 tokens");
    datagen::Image overlay;
    overlay.width = overlay.height = static_cast<int>(ec.image_size);
    overlay.rgb.assign(ec.image_size * ec.image_size * 3, 0);
    std::vector<bool> covered(patches, false);
    std::set<std::array<std::uint8_t, 3>> colors;
    for (std::size_t g = 0; g < result.batch.groups.size(); ++g) {
        for (auto patch : result.batch.groups[g]) {
            if (patch >= patches) continue;  // the protected token's sentinel
            covered[patch] = true;
            const auto color = palette(g);
            colors.insert(color);
            const std::size_t py = patch / side, px = patch % side;
            for (std::size_t y = 0; y < ec.patch_size; ++y)
                for (std::size_t x = 0; x < ec.patch_size; ++x) {
                    const std::size_t at = ((py * ec.patch_size + y) * ec.image_size + px * ec.patch_size + x) * 3;
                    for (int ch = 0; ch < 3; ++ch) overlay.rgb[at + ch] = color[ch];
                }
        }
    }
    datagen::write_ppm(out, overlay);
    const auto colored = static_cast<std::size_t>(std::count(covered.begin(), covered.end(), true));
    std::cout << json{{"schema_version", kSchemaVersion},
                      {"kind", "merge_viz"},
                      {"patches", patches},
                      {"colored_patches", colored},
                      {"final_tokens", result.counts.back()},
                      {"distinct_colors", colors.size()},
                      {"trained", !ckpt.empty()},
                      {"out", out.string()}}
                     .dump()
              << '\n';
    return kOk;
}

int cmd_temporal_check(const ConfigArgs& args) {
    const config::RunConfig cfg = resolve(args);
    temporal::EncoderConfig ec = cfg.model.encoder;
    if (ec.temporal_blocks.empty()) {
        for (std::size_t i = 0; i < ec.num_layers; ++i) ec.temporal_blocks.push_back(i);
    }
    Rng rng(captioner::derive_seed(cfg.seed, 1));
    const temporal::VisionEncoder encoder(ec, rng);
    const auto checks = temporal::check_properties(encoder, captioner::derive_seed(cfg.seed, 41));
    json rows = json::array();
    bool ok = true;
    for (const auto& c : checks) {
        rows.push_back({{"name", c.name},
                        {"status", temporal::status_name(c.status)},
                        {"max_diff", c.max_diff},
                        {"tolerance", c.tolerance}});
        ok = ok && c.status != temporal::CheckStatus::fail;
    }
    std::cout << json{{"schema_version", kSchemaVersion}, {"kind", "temporal_check"}, {"passed", ok}, {"checks", rows}}
                     .dump(2)
              << '\n';
    return ok ? kOk : kPropertyFailure;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
    // Training allocates and frees the same large activation buffers every
    // step; keeping them in the heap avoids an mmap and page faults per op.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    CLI::App app{"evlgen: token-merging captioner toolkit"};
    app.require_subcommand(1);

    std::string out, data, input, ckpt, eval;
    std::size_t n = 0, video = 0, max_len = 0;
    std::uint64_t seed = 0;
    bool qformer = false, as_json = false;
    int stage = 2;
    std::vector<int> r_list{10, 13, 16, 19, 22, 25};
    ConfigArgs cfg_args;

    auto* datagen_cmd = app.add_subcommand("datagen", "write a synthetic corpus");
    datagen_cmd->add_option("--out", out, "corpus directory")->required();
    datagen_cmd->add_option("--n", n, "number of samples")->required();
    datagen_cmd->add_option("--seed", seed, "generator seed");
    datagen_cmd->add_option("--video", video, "frames per sample (video corpus)");

    auto* train_cmd = app.add_subcommand("train", "pretrain backbones, then train connector and temporal modules");
    add_config_options(train_cmd, cfg_args);
    train_cmd->add_option("--data", data, "training corpus")->required();
    train_cmd->add_option("--out", out, "output directory (log.tsv, model.evlg)")->required();
    train_cmd->add_option("--eval", eval, "held-out corpus for exact-match scoring");

    auto* generate_cmd = app.add_subcommand("generate", "caption an image or frame directory");
    generate_cmd->add_option("--checkpoint", ckpt, "model checkpoint")->required();
    generate_cmd->add_option("--input", input, "image .ppm or directory of frame<k>.ppm")->required();
    generate_cmd->add_option("--max-len", max_len, "maximum generated tokens (default: decoder context)");

    auto* macs_cmd = app.add_subcommand("macs", "connector cost report");
    add_config_options(macs_cmd, cfg_args);
    macs_cmd->add_flag("--qformer", qformer, "report the Q-Former reference instead of TomeFormer");
    macs_cmd->add_option("--stage", stage, "Q-Former stage (1 or 2)")->check(CLI::Range(1, 2));
    macs_cmd->add_flag("--json", as_json, "machine-readable output");

    auto* ablate_cmd = app.add_subcommand("ablate-r", "connector MACs over merge quotas");
    add_config_options(ablate_cmd, cfg_args);
    ablate_cmd->add_option("--r-list", r_list, "comma-separated quotas")->delimiter(',');
    ablate_cmd->add_flag("--json", as_json, "machine-readable output");

    auto* viz_cmd = app.add_subcommand("merge-viz", "color patches by final merge group");
    add_config_options(viz_cmd, cfg_args);
    viz_cmd->add_option("--checkpoint", ckpt, "trained checkpoint (random init when omitted)");
    viz_cmd->add_option("--input", input, "image .ppm")->required();
    viz_cmd->add_option("--out", out, "overlay .ppm")->required();

    auto* temporal_cmd = app.add_subcommand("temporal-check", "static-frame and permutation property suite");
    add_config_options(temporal_cmd, cfg_args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*datagen_cmd) return cmd_datagen(out, n, seed, video);
        if (*train_cmd) return cmd_train(cfg_args, data, out, eval);
        if (*generate_cmd) return cmd_generate(ckpt, input, max_len);
        if (*macs_cmd) return cmd_macs(cfg_args, qformer, stage, as_json);
        if (*ablate_cmd) return cmd_ablate_r(cfg_args, r_list, as_json);
        if (*viz_cmd) return cmd_merge_viz(cfg_args, ckpt, input, out);
        if (*temporal_cmd) return cmd_temporal_check(cfg_args);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kData;
    }
    return kUsage;
}
