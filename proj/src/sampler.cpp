// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#include "locgen/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "locgen/error.hpp"

namespace locgen {

void SamplerConfig::validate(int vocab_size) const {
  if (top_k < 1 || top_k > vocab_size) {
    throw UsageError("top_k must be in [1, " + std::to_string(vocab_size) + "], got " + std::to_string(top_k));
  }
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw UsageError("temperature must be > 0");
  if (max_draws < 1) throw UsageError("max_draws must be >= 1");
  if (min_box_bins < 1) throw UsageError("min_box_bins must be >= 1");
}

CoordinateBounds full_bounds(int num_bins) { return {0, num_bins - 1, 0, num_bins - 1}; }

CoordinateBounds region_bounds(const Region& r, int num_bins, int min_box_bins) {
  const double s = num_bins;
  const bool finite = std::isfinite(r.x1) && std::isfinite(r.y1) && std::isfinite(r.x2) && std::isfinite(r.y2);
  if (!finite || r.x1 < 0 || r.y1 < 0 || r.x2 > s || r.y2 > s || r.x1 >= r.x2 || r.y1 >= r.y2) {
    throw UsageError("region must be canonical, inside [0, " + std::to_string(num_bins) + "] and of positive area");
  }
  CoordinateBounds b;
  b.x_lo = static_cast<int>(std::ceil(r.x1));
  b.y_lo = static_cast<int>(std::ceil(r.y1));
  b.x_hi = std::min(static_cast<int>(std::floor(r.x2)), num_bins - 1);
  b.y_hi = std::min(static_cast<int>(std::floor(r.y2)), num_bins - 1);
  if (b.x_hi - b.x_lo < min_box_bins || b.y_hi - b.y_lo < min_box_bins) {
    throw UsageError("region too small to hold a box of " + std::to_string(min_box_bins) + " bins per side");
  }
  return b;
}

std::array<int, 2> feasible_interval(int step, std::span<const int> drawn, const CoordinateBounds& b, int m) {
  switch (step) {
    case 0: return {b.x_lo, b.x_hi - m};
    case 1: return {b.y_lo, b.y_hi - m};
    case 2: return {std::max(b.x_lo, drawn[0] + m), b.x_hi};
    case 3: return {std::max(b.y_lo, drawn[1] + m), b.y_hi};
    default: throw UsageError("feasible_interval: step must be in [0, 3]");
  }
}

std::vector<double> next_token_distribution(std::span<const float> logits, const SamplerConfig& config,
                                            std::span<const char> feasible) {
  const int V = static_cast<int>(logits.size());
  if (V < 2) throw UsageError("next_token_distribution: vocabulary too small");
  if (!feasible.empty() && static_cast<int>(feasible.size()) != V) {
    throw UsageError("next_token_distribution: mask length does not match logits");
  }
  const int eos = V - 1;
  std::vector<int> cand;
  cand.reserve(V);
  for (int i = 0; i < V; ++i) {
    if (!std::isfinite(logits[i])) throw NumericError("next_token_distribution: non-finite logit at " + std::to_string(i));
    if (i == eos || (!feasible.empty() && !feasible[i])) continue;
    cand.push_back(i);
  }
  if (cand.empty()) throw UsageError("next_token_distribution: every token is masked");
  const std::size_t k = std::min<std::size_t>(cand.size(), static_cast<std::size_t>(std::max(config.top_k, 1)));
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(), [&](int a, int b) {
    return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
  });
  cand.resize(k);
  const double mx = logits[cand.front()];
  std::vector<double> p(V, 0.0);
  double z = 0.0;
  for (int i : cand) z += (p[i] = std::exp((logits[i] - mx) / config.temperature));
  for (int i : cand) p[i] /= z;
  return p;
}

namespace {

double log_softmax_at(std::span<const float> logits, int token) {
  double mx = -std::numeric_limits<double>::infinity();
  for (float v : logits) mx = std::max(mx, static_cast<double>(v));
  double z = 0.0;
  for (float v : logits) z += std::exp(v - mx);
  return logits[token] - mx - std::log(z);
}

}  // namespace

SampledBox sample_with_decoder(SceneDecoder& dec, const SamplerConfig& config, const CoordinateBounds& bounds,
                               Rng& rng) {
  const ModelConfig& mc = dec.config();
  const int V = mc.vocab_size();
  std::array<int, 4> t{};
  double lp = 0.0;
  std::vector<char> feasible(V);
  for (int step = 0; step < 4; ++step) {
    const auto logits = dec.logits(std::span<const int>(t.data(), step));
    const auto [lo, hi] = feasible_interval(step, std::span<const int>(t.data(), step), bounds, config.min_box_bins);
    if (lo > hi) throw InvariantError("sampler: empty feasible interval at step " + std::to_string(step));
    std::fill(feasible.begin(), feasible.end(), 0);
    std::fill(feasible.begin() + lo, feasible.begin() + hi + 1, 1);
    const auto p = next_token_distribution(logits, config, feasible);
    const double u = rng.uniform();
    double acc = 0.0;
    int pick = -1;
    for (int i = lo; i <= hi; ++i) {
      if (p[i] <= 0.0) continue;
      pick = i;
      acc += p[i];
      if (u < acc) break;
    }
    t[step] = pick;
    lp += log_softmax_at(logits, pick);
  }
  SampledBox out;
  out.tokens = TokenSequence{t, mc.num_bins};
  out.bbox = dequantize(out.tokens);
  out.logprob = lp;
  if (out.bbox.width() < config.min_box_bins || out.bbox.height() < config.min_box_bins) {
    throw InvariantError("sampler produced a box below min_box_bins: " + to_string(out.bbox));
  }
  return out;
}

SampledBox sample_location(const ModelParams<float>& params, const Scene& scene, int class_id,
                           const SamplerConfig& config, Rng& rng) {
  config.validate(params.config.vocab_size());
  SceneDecoder dec(params, scene, class_id);
  return sample_with_decoder(dec, config, full_bounds(params.config.num_bins), rng);
}

std::vector<SampledBox> sample_k_locations(const ModelParams<float>& params, const Scene& scene, int class_id,
                                           const SamplerConfig& config, int K, const Rng& rng,
                                           std::optional<Region> region) {
  if (K < 1) throw UsageError("K must be >= 1");
  config.validate(params.config.vocab_size());
  const CoordinateBounds b = region ? region_bounds(*region, params.config.num_bins, config.min_box_bins)
                                    : full_bounds(params.config.num_bins);
  SceneDecoder dec(params, scene, class_id);
  std::vector<SampledBox> out;
  out.reserve(K);
  for (int i = 0; i < K; ++i) {
    Rng r = rng.split(static_cast<std::uint64_t>(i));
    out.push_back(sample_with_decoder(dec, config, b, r));
  }
  return out;
}

SampledBox constrained_sample(const ModelParams<float>& params, const Scene& scene, int class_id,
                              const SamplerConfig& config, const Region& region, Rng& rng) {
  config.validate(params.config.vocab_size());
  const CoordinateBounds b = region_bounds(region, params.config.num_bins, config.min_box_bins);
  SceneDecoder dec(params, scene, class_id);
  return sample_with_decoder(dec, config, b, rng);
}

BBox random_valid_box(int num_bins, int m, Rng& rng) {
  // Number of (lo, hi) pairs with hi >= lo + m inside [0, num_bins - 1].
  const std::int64_t n = num_bins - m;
  if (n < 1) throw UsageError("random_valid_box: min_box_bins too large");
  const std::int64_t pairs = n * (n + 1) / 2;
  auto draw_axis = [&](int& lo, int& hi) {
    std::int64_t idx = rng.uniform_int(0, pairs - 1);
    lo = 0;
    // Pairs starting at lo: n - lo.
    while (idx >= n - lo) {
      idx -= n - lo;
      ++lo;
    }
    hi = lo + m + static_cast<int>(idx);
  };
  int x1, x2, y1, y2;
  draw_axis(x1, x2);
  draw_axis(y1, y2);
  return BBox{static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x2), static_cast<double>(y2),
              num_bins};
}

}  // namespace locgen
