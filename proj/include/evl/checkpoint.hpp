// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "evl/nn.hpp"

// Flat little-endian checkpoint:
//
//   "EVLG"  u32 version  u64 config_digest  u32 config_len  config bytes
//   u32 blob_count
//   per blob: u32 name_len  name  u32 rank  u64 extent[rank]  f64 value[numel]
//
// config_digest is FNV-1a 64 over the config bytes. Blobs appear in parameter
// declaration order.
namespace evl::checkpoint {

inline constexpr char kMagic[4] = {'E', 'V', 'L', 'G'};
inline constexpr std::uint32_t kVersion = 1;

struct Blob {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    std::uint32_t version = kVersion;
    std::uint64_t config_digest = 0;
    std::string config;
    std::vector<Blob> blobs;
};

std::uint64_t fnv1a64(std::string_view bytes);

Checkpoint capture(const nn::ParameterList& params, std::string config);
std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);

void save(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load(const std::filesystem::path& path);

// Copies blob values into params; names, order and shapes must match.
void restore(const Checkpoint& ckpt, const nn::ParameterList& params);

}  // namespace evl::checkpoint
