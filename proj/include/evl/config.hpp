// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "evl/captioner.hpp"
#include "evl/costmodel.hpp"

// JSON run configuration shared by every command. Documents are overlaid on
// the defaults; keys the defaults do not have are rejected with their path.
namespace evl::config {

struct MacsConfig {
    std::size_t initial_tokens = 256;
    connector::TomeFormerConfig connector;  // paper-scale widths by default
    costmodel::QFormerConfig qformer;
};

struct RunConfig {
    std::uint64_t seed = 0;
    captioner::ModelConfig model;
    captioner::TrainConfig train;
    captioner::PretrainConfig pretrain;
    MacsConfig macs;

    void validate() const;
};

// Tiny image captioning setup plus paper-scale cost-model widths.
RunConfig defaults();

nlohmann::json to_json(const RunConfig& config);
// Overlays `doc` on defaults(); unknown keys and wrongly typed values throw ConfigError.
RunConfig from_json(const nlohmann::json& doc);

// "a.b.c=value": value parsed as JSON when possible, else taken as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

RunConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

// Deterministic text form used for echoing and checkpoint headers.
std::string dump(const RunConfig& config);

// Model section alone, as stored inside checkpoints.
nlohmann::json model_to_json(const captioner::ModelConfig& model);
captioner::ModelConfig model_from_json(const nlohmann::json& doc);

}  // namespace evl::config
