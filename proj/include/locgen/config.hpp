// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "locgen/model.hpp"
#include "locgen/sampler.hpp"
#include "locgen/scene.hpp"
#include "locgen/train.hpp"

namespace locgen {

/// Flat `section.key -> value` settings. Every known key is present after
/// resolution, so the map can be echoed verbatim into artifacts.
class RunConfig {
 public:
  /// All known keys with their defaults.
  RunConfig();

  /// Parses `key = value` lines; `#` starts a comment, `[section]` headers
  /// prefix following keys. Unknown keys are rejected.
  void merge_text(const std::string& text, const std::string& origin = "config");
  void merge_file(const std::filesystem::path& path);
  /// `key=value` from the command line.
  void set_override(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  const std::string& get(const std::string& key) const;
  int get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::vector<int> get_int_list(const std::string& key) const;

  nlohmann::json to_json() const;
  const std::map<std::string, std::string>& values() const { return values_; }

  DatasetConfig dataset() const;
  ModelConfig model() const;
  TrainConfig train() const;
  DpoConfig dpo() const;
  SamplerConfig sampler() const;
  /// Seed for dataset generation, derived from `seed`.
  std::uint64_t dataset_seed() const;

 private:
  std::map<std::string, std::string> values_;
};

/// Parses "x1,y1,x2,y2". Throws UsageError when malformed.
Region parse_region(const std::string& text);

}  // namespace locgen
