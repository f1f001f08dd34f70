// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "locgen/geometry.hpp"
#include "locgen/infer.hpp"
#include "locgen/model.hpp"
#include "locgen/rng.hpp"

namespace locgen {

struct SamplerConfig {
  /// 50 of 512 bins at full scale is about 6 of 64; rounded up to 8.
  int top_k = 8;
  double temperature = 1.0;
  int max_draws = 100;
  int min_box_bins = 1;
  std::uint64_t seed = 0;

  /// Throws UsageError when a field is out of range for `vocab_size`.
  void validate(int vocab_size) const;
};

/// Allowed sampling rectangle in pixels.
struct Region {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

struct SampledBox {
  BBox bbox;
  TokenSequence tokens;
  /// Unmodified model log-probability of the tokens (no top-k or masking).
  double logprob = 0.0;
};

/// Per-axis inclusive bin interval that every coordinate on that axis must lie in.
struct CoordinateBounds {
  int x_lo = 0, x_hi = 0, y_lo = 0, y_hi = 0;
};

/// Full-image bounds: every bin is allowed.
CoordinateBounds full_bounds(int num_bins);
/// Bins whose pixel value lies inside `region`. Throws UsageError when the
/// region is malformed or cannot hold a box of min_box_bins per side.
CoordinateBounds region_bounds(const Region& region, int num_bins, int min_box_bins);

/// Inclusive interval of feasible bins for coordinate `step` (0..3) given
/// the tokens already drawn.
std::array<int, 2> feasible_interval(int step, std::span<const int> drawn, const CoordinateBounds& b,
                                     int min_box_bins);

/// Top-k, temperature and softmax over `logits`; EOS (the last token) is
/// always masked. When `feasible` is non-empty, tokens with feasible[i] == 0
/// are removed before the top-k cut. Ties keep the lower token index.
/// Throws NumericError on non-finite logits and UsageError when nothing survives.
std::vector<double> next_token_distribution(std::span<const float> logits, const SamplerConfig& config,
                                            std::span<const char> feasible = {});

/// One draw from a prepared decoder.
SampledBox sample_with_decoder(SceneDecoder& decoder, const SamplerConfig& config, const CoordinateBounds& bounds,
                               Rng& rng);

SampledBox sample_location(const ModelParams<float>& params, const Scene& scene, int class_id,
                           const SamplerConfig& config, Rng& rng);

/// K independent draws; draw i uses rng.split(i), so K = 1 matches
/// sample_location with rng.split(0). No deduplication.
std::vector<SampledBox> sample_k_locations(const ModelParams<float>& params, const Scene& scene, int class_id,
                                           const SamplerConfig& config, int K, const Rng& rng,
                                           std::optional<Region> region = std::nullopt);

SampledBox constrained_sample(const ModelParams<float>& params, const Scene& scene, int class_id,
                              const SamplerConfig& config, const Region& region, Rng& rng);

/// Uniform draw over all valid token sequences (x2 >= x1 + m, y2 >= y1 + m).
BBox random_valid_box(int num_bins, int min_box_bins, Rng& rng);

}  // namespace locgen
