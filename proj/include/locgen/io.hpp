// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "locgen/model.hpp"
#include "locgen/scene.hpp"

namespace locgen {

using json = nlohmann::json;

inline constexpr const char* kVersion = "locgen 0.1.0";

/// Writes to a sibling temp file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

/// First line of every JSONL artifact: the resolved run configuration and code version.
std::string jsonl_header(const json& run_config);
/// Parses a JSONL file, skipping the header line if present.
std::vector<json> read_jsonl(const std::filesystem::path& path, json* header = nullptr);

json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const json& j);

/// Binary checkpoint: "LOCGCKPT", u64 little-endian header length, JSON header
/// (config, tensor table, run config, format version), then float32 payload.
std::string encode_checkpoint(const ModelParams<float>& params, const json& run_config);
ModelParams<float> decode_checkpoint(const std::string& bytes, json* run_config = nullptr);
void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& params, const json& run_config);
ModelParams<float> load_checkpoint(const std::filesystem::path& path, json* run_config = nullptr);

/// Per channel, run lengths over the row-major bit stream, starting with a
/// run of zeros (possibly empty).
json grid_rle(const Scene& scene);
void apply_grid_rle(const json& rle, Scene& scene);

json scene_to_json(const Scene& scene);
Scene scene_from_json(const json& j);
json annotation_set_to_json(const AnnotationSet& s, const Scene& scene);
AnnotationSet annotation_set_from_json(const json& j);

/// Writes <dir>/{train,test}/{scenes,annotations}.jsonl.
void write_dataset(const std::filesystem::path& dir, const DatasetPair& data, const json& run_config);
Dataset read_split(const std::filesystem::path& dir, Split split);

}  // namespace locgen
