// SPDX-License-Identifier: Apache-2.0
#include "evl/config.hpp"

#include <fstream>
#include <sstream>

namespace evl::config {

using nlohmann::json;

namespace {

json encoder_json(const temporal::EncoderConfig& e) {
    return {{"image_size", e.image_size},
            {"patch_size", e.patch_size},
            {"channels", e.channels},
            {"model_dim", e.model_dim},
            {"num_heads", e.num_heads},
            {"num_layers", e.num_layers},
            {"mlp_ratio", e.mlp_ratio},
            {"use_cls", e.use_cls},
            {"init_std", e.init_std},
            {"temporal_blocks", e.temporal_blocks},
            {"temporal",
             {{"logit_scaling", e.temporal.logit_scaling},
              {"position_encoding", e.temporal.position_encoding},
              {"max_frames", e.temporal.max_frames}}}};
}

temporal::EncoderConfig encoder_from(const json& j) {
    temporal::EncoderConfig e;
    j.at("image_size").get_to(e.image_size);
    j.at("patch_size").get_to(e.patch_size);
    j.at("channels").get_to(e.channels);
    j.at("model_dim").get_to(e.model_dim);
    j.at("num_heads").get_to(e.num_heads);
    j.at("num_layers").get_to(e.num_layers);
    j.at("mlp_ratio").get_to(e.mlp_ratio);
    j.at("use_cls").get_to(e.use_cls);
    j.at("init_std").get_to(e.init_std);
    j.at("temporal_blocks").get_to(e.temporal_blocks);
    const json& t = j.at("temporal");
    t.at("logit_scaling").get_to(e.temporal.logit_scaling);
    t.at("position_encoding").get_to(e.temporal.position_encoding);
    t.at("max_frames").get_to(e.temporal.max_frames);
    return e;
}

const char* policy_name(tokmerge::PartitionPolicy p) {
    return p == tokmerge::PartitionPolicy::alternating ? "alternating" : "seeded_random";
}

json connector_json(const connector::TomeFormerConfig& c) {
    return {{"num_layers", c.num_layers},
            {"model_dim", c.model_dim},
            {"num_heads", c.num_heads},
            {"mlp_ratio", c.mlp_ratio},
            {"r", c.schedule.r},
            {"include_protected_token", c.include_protected_token},
            {"proportional_attention", c.proportional_attention},
            {"partition_policy", policy_name(c.partition_policy)},
            {"partition_seed", c.partition_seed},
            {"init_std", c.init_std},
            {"max_frames", c.max_frames}};
}

connector::TomeFormerConfig connector_from(const json& j) {
    connector::TomeFormerConfig c;
    j.at("num_layers").get_to(c.num_layers);
    j.at("model_dim").get_to(c.model_dim);
    j.at("num_heads").get_to(c.num_heads);
    j.at("mlp_ratio").get_to(c.mlp_ratio);
    j.at("r").get_to(c.schedule.r);
    c.schedule.num_layers = c.num_layers;
    j.at("include_protected_token").get_to(c.include_protected_token);
    j.at("proportional_attention").get_to(c.proportional_attention);
    j.at("max_frames").get_to(c.max_frames);
    const auto policy = j.at("partition_policy").get<std::string>();
    if (policy == "alternating") {
        c.partition_policy = tokmerge::PartitionPolicy::alternating;
    } else if (policy == "seeded_random") {
        c.partition_policy = tokmerge::PartitionPolicy::seeded_random;
    } else {
        throw ConfigError("connector.partition_policy must be \"alternating\" or \"seeded_random\", got \"" + policy +
                          "\"");
    }
    j.at("partition_seed").get_to(c.partition_seed);
    j.at("init_std").get_to(c.init_std);
    return c;
}

json decoder_json(const decoder::DecoderConfig& d) {
    return {{"vocab_size", d.vocab_size}, {"model_dim", d.model_dim},   {"num_heads", d.num_heads},
            {"num_layers", d.num_layers}, {"mlp_ratio", d.mlp_ratio},   {"caption_context", d.caption_context},
            {"init_std", d.init_std}};
}

decoder::DecoderConfig decoder_from(const json& j) {
    decoder::DecoderConfig d;
    j.at("vocab_size").get_to(d.vocab_size);
    j.at("model_dim").get_to(d.model_dim);
    j.at("num_heads").get_to(d.num_heads);
    j.at("num_layers").get_to(d.num_layers);
    j.at("mlp_ratio").get_to(d.mlp_ratio);
    j.at("caption_context").get_to(d.caption_context);
    j.at("init_std").get_to(d.init_std);
    return d;
}

json train_json(const captioner::TrainConfig& t) {
    return {{"max_lr", t.max_lr},
            {"min_lr", t.min_lr},
            {"start_lr", t.start_lr},
            {"warmup_steps", t.warmup_steps},
            {"total_steps", t.total_steps},
            {"weight_decay", t.weight_decay},
            {"batch_size", t.batch_size},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"adam_eps", t.adam_eps}};
}

captioner::TrainConfig train_from(const json& j, std::uint64_t seed) {
    captioner::TrainConfig t;
    j.at("max_lr").get_to(t.max_lr);
    j.at("min_lr").get_to(t.min_lr);
    j.at("start_lr").get_to(t.start_lr);
    j.at("warmup_steps").get_to(t.warmup_steps);
    j.at("total_steps").get_to(t.total_steps);
    j.at("weight_decay").get_to(t.weight_decay);
    j.at("batch_size").get_to(t.batch_size);
    j.at("beta1").get_to(t.beta1);
    j.at("beta2").get_to(t.beta2);
    j.at("adam_eps").get_to(t.adam_eps);
    t.seed = seed;
    return t;
}

json pretrain_json(const captioner::PretrainConfig& p) {
    return {{"encoder_steps", p.encoder_steps}, {"decoder_steps", p.decoder_steps}, {"encoder_lr", p.encoder_lr},
            {"decoder_lr", p.decoder_lr},       {"batch_size", p.batch_size},       {"video_frames", p.video_frames}};
}

captioner::PretrainConfig pretrain_from(const json& j, std::uint64_t seed) {
    captioner::PretrainConfig p;
    j.at("encoder_steps").get_to(p.encoder_steps);
    j.at("decoder_steps").get_to(p.decoder_steps);
    j.at("encoder_lr").get_to(p.encoder_lr);
    j.at("decoder_lr").get_to(p.decoder_lr);
    j.at("batch_size").get_to(p.batch_size);
    j.at("video_frames").get_to(p.video_frames);
    p.seed = seed;
    return p;
}

json qformer_json(const costmodel::QFormerConfig& q) {
    return {{"queries", q.queries},       {"image_tokens", q.image_tokens},   {"image_dim", q.image_dim},
            {"num_layers", q.num_layers}, {"model_dim", q.model_dim},         {"num_heads", q.num_heads},
            {"mlp_ratio", q.mlp_ratio},   {"cross_cadence", q.cross_cadence}, {"text_len", q.text_len},
            {"vocab_size", q.vocab_size}, {"hard_negatives", q.hard_negatives}};
}

costmodel::QFormerConfig qformer_from(const json& j) {
    costmodel::QFormerConfig q;
    j.at("queries").get_to(q.queries);
    j.at("image_tokens").get_to(q.image_tokens);
    j.at("image_dim").get_to(q.image_dim);
    j.at("num_layers").get_to(q.num_layers);
    j.at("model_dim").get_to(q.model_dim);
    j.at("num_heads").get_to(q.num_heads);
    j.at("mlp_ratio").get_to(q.mlp_ratio);
    j.at("cross_cadence").get_to(q.cross_cadence);
    j.at("text_len").get_to(q.text_len);
    j.at("vocab_size").get_to(q.vocab_size);
    j.at("hard_negatives").get_to(q.hard_negatives);
    return q;
}

bool same_kind(const json& base, const json& value) {
    if (base.is_number_unsigned()) return value.is_number_unsigned();
    if (base.is_number_integer()) return value.is_number_integer();
    if (base.is_number_float()) return value.is_number();
    if (base.is_array() && value.is_array()) {
        for (const auto& v : value) {
            if (!v.is_number_unsigned()) return false;  // only index lists live in arrays
        }
        return true;
    }
    return base.type() == value.type();
}

void overlay(json& base, const json& doc, const std::string& path) {
    if (!doc.is_object()) throw ConfigError("config " + (path.empty() ? std::string("document") : path) + " must be an object");
    for (const auto& [key, value] : doc.items()) {
        const std::string where = path.empty() ? key : path + "." + key;
        if (!base.contains(key)) throw ConfigError("unknown config key " + where);
        json& slot = base[key];
        if (slot.is_object()) {
            overlay(slot, value, where);
        } else if (!same_kind(slot, value)) {
            throw ConfigError("config key " + where + " expects " + std::string(slot.type_name()) + ", got " +
                              value.dump());
        } else {
            slot = value;
        }
    }
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    train.validate();
    macs.connector.validate();
    if (pretrain.batch_size == 0) throw ConfigError("pretrain.batch_size must be positive");
}

RunConfig defaults() {
    RunConfig c;
    c.model.connector.num_layers = 2;
    c.model.connector.model_dim = 32;
    c.model.connector.num_heads = 2;
    c.model.connector.schedule = {16, 2};
    c.model.video_r_multiplier = 6.0;
    c.train.max_lr = 3e-3;
    c.train.min_lr = 1e-4;
    c.train.start_lr = 1e-5;
    c.train.warmup_steps = 200;
    c.train.total_steps = 3000;
    c.macs.connector.model_dim = 768;
    c.macs.connector.num_heads = 12;
    return c;
}

json model_to_json(const captioner::ModelConfig& m) {
    return {{"encoder", encoder_json(m.encoder)},
            {"connector", connector_json(m.connector)},
            {"decoder", decoder_json(m.decoder)},
            {"video_r_multiplier", m.video_r_multiplier},
            {"seed", m.seed}};
}

captioner::ModelConfig model_from_json(const json& doc) {
    json base = model_to_json(defaults().model);
    overlay(base, doc, "model");
    captioner::ModelConfig m;
    m.encoder = encoder_from(base.at("encoder"));
    m.connector = connector_from(base.at("connector"));
    m.decoder = decoder_from(base.at("decoder"));
    base.at("video_r_multiplier").get_to(m.video_r_multiplier);
    base.at("seed").get_to(m.seed);
    return m;
}

json to_json(const RunConfig& c) {
    json model = model_to_json(c.model);
    model.erase("seed");  // the run seed drives every stream
    const json macs_connector = {{"num_layers", c.macs.connector.num_layers},
                                 {"model_dim", c.macs.connector.model_dim},
                                 {"num_heads", c.macs.connector.num_heads},
                                 {"mlp_ratio", c.macs.connector.mlp_ratio},
                                 {"r", c.macs.connector.schedule.r},
                                 {"include_protected_token", c.macs.connector.include_protected_token}};
    return {{"seed", c.seed},
            {"model", model},
            {"train", train_json(c.train)},
            {"pretrain", pretrain_json(c.pretrain)},
            {"macs",
             {{"initial_tokens", c.macs.initial_tokens},
              {"connector", macs_connector},
              {"qformer", qformer_json(c.macs.qformer)}}}};
}

RunConfig from_json(const json& doc) {
    json base = to_json(defaults());
    overlay(base, doc, "");
    RunConfig c;
    base.at("seed").get_to(c.seed);
    json model = base.at("model");
    model["seed"] = c.seed;
    c.model = model_from_json(model);
    c.train = train_from(base.at("train"), c.seed);
    c.pretrain = pretrain_from(base.at("pretrain"), c.seed);
    const json& macs = base.at("macs");
    macs.at("initial_tokens").get_to(c.macs.initial_tokens);
    const json& mc = macs.at("connector");
    mc.at("num_layers").get_to(c.macs.connector.num_layers);
    mc.at("model_dim").get_to(c.macs.connector.model_dim);
    mc.at("num_heads").get_to(c.macs.connector.num_heads);
    mc.at("mlp_ratio").get_to(c.macs.connector.mlp_ratio);
    mc.at("r").get_to(c.macs.connector.schedule.r);
    c.macs.connector.schedule.num_layers = c.macs.connector.num_layers;
    mc.at("include_protected_token").get_to(c.macs.connector.include_protected_token);
    c.macs.qformer = qformer_from(macs.at("qformer"));
    c.validate();
    return c;
}

void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override \"" + assignment + "\" is not key.path=value");
    const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError("override \"" + assignment + "\" has an empty key segment");
        if (!node->is_object()) throw ConfigError("override \"" + assignment + "\" descends into a non-object");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        if (node->is_null()) *node = json::object();
        start = dot + 1;
    }
}

RunConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
    json doc = json::object();
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config " + path.string());
        doc = json::parse(in, nullptr, false);
        if (doc.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
    }
    for (const auto& o : overrides) apply_override(doc, o);
    return from_json(doc);
}

std::string dump(const RunConfig& config) { return to_json(config).dump(2); }

}  // namespace evl::config
