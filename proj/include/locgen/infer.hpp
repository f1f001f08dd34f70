// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "locgen/model.hpp"

namespace locgen {

/// Value-only incremental decoder for one (scene, class) pair. The scene
/// prefix and SOS are run once; every coordinate prefix is then extended one
/// token at a time against cached keys and values, and memoized so repeated
/// draws share work. Each position is computed with row-vector products, so
/// the logits for a given prefix never depend on which other prefixes were
/// visited first.
class SceneDecoder {
 public:
  SceneDecoder(const ModelParams<float>& params, const Scene& scene, int class_id);

  /// Next-coordinate logits after `coords` (0..3 tokens). The returned span
  /// stays valid for the lifetime of the decoder.
  std::span<const float> logits(std::span<const int> coords);

  const ModelConfig& config() const { return params_.config; }
  std::size_t cached_prefixes() const { return memo_.size(); }

 private:
  struct Entry {
    std::vector<float> kv;  // per layer: key row then value row
    std::vector<float> logits;
  };

  const Entry& entry(std::span<const int> coords);
  void run_position(const float* x_in, std::span<const Entry* const> path, Entry& out) const;

  const ModelParams<float>& params_;
  int d_ = 0;
  int prefix_rows_ = 0;  // scene patches + class + SOS
  std::vector<float> prefix_kv_;  // [layer][k|v][row][d]
  std::vector<float> sos_logits_;
  std::unordered_map<std::uint64_t, Entry> memo_;

  struct Layer {
    const float *ln1g, *ln1b, *wqkv, *bq, *bv, *wo, *bo, *ln2g, *ln2b, *w1, *b1, *w2, *b2;
  };
  std::vector<Layer> layers_;
  const float *tok_emb_, *tok_pos_, *lnf_g_, *lnf_b_, *head_w_, *head_b_;
};

}  // namespace locgen
