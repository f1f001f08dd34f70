// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "locgen/autodiff.hpp"
#include "locgen/geometry.hpp"
#include "locgen/scene.hpp"

namespace locgen {

/// Shape of the conditional location model. The vocabulary holds one token
/// per coordinate bin plus SOS and EOS.
struct ModelConfig {
  int image_size = 64;
  int patch_size = 8;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int num_bins = 64;
  int num_classes = 4;
  std::uint64_t seed = 0;

  int vocab_size() const { return num_bins + 2; }
  int sos_token() const { return num_bins; }
  int eos_token() const { return num_bins + 1; }
  int channels() const { return num_classes + 2; }
  int patches_per_side() const { return image_size / patch_size; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }
  int patch_dim() const { return channels() * patch_size * patch_size; }
  /// Scene patches plus the class token.
  int prefix_length() const { return num_patches() + 1; }
  /// Throws UsageError when the configuration is inconsistent.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Learnable tensors, addressed by name. T is float for training and
/// double for gradient checks.
template <typename T>
struct ModelParams {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<ad::Tensor<T>> tensors;

  std::size_t index(const std::string& name) const;
  const ad::Tensor<T>& get(const std::string& name) const { return tensors[index(name)]; }
  ad::Tensor<T>& get(const std::string& name) { return tensors[index(name)]; }
  std::size_t parameter_count() const;
  bool all_finite() const;

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.config = config;
    out.names = names;
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }
};

/// Weights N(0, 0.02^2), layernorm gains 1, biases 0, output head zero.
ModelParams<float> init_params(const ModelConfig& config);

/// Flattens a scene into per-patch feature rows [num_patches, channels * patch^2],
/// ordered (channel, dy, dx) within a patch.
template <typename T>
std::vector<T> patchify(const Scene& scene, const ModelConfig& config);

/// Parameters registered on a tape for one forward pass.
template <typename T>
struct BoundParams {
  const ModelParams<T>* params = nullptr;
  std::vector<ad::Var<T>> vars;

  ad::Var<T> operator[](const std::string& name) const { return vars[params->index(name)]; }
};

template <typename T>
BoundParams<T> bind(ad::Tape<T>& tape, const ModelParams<T>& params, bool requires_grad);

/// One training / scoring item.
struct ModelInput {
  const Scene* scene = nullptr;
  int class_id = 0;
};

/// Prefix embeddings [B, prefix_length, d]: projected patches plus positional
/// embeddings, followed by the class embedding.
template <typename T>
ad::Var<T> prefix_embeddings(const BoundParams<T>& p, std::span<const ModelInput> batch);

/// Runs the causal decoder over [prefix | SOS | coords] for a batch whose
/// coordinate prefixes all have the same length L in [0, 3]. Returns logits
/// [B, L + 1, vocab] for the positions SOS .. last coordinate.
template <typename T>
ad::Var<T> decoder_logits(const BoundParams<T>& p, std::span<const ModelInput> batch,
                          std::span<const std::vector<int>> coords);

/// Per-item log pi(Y | X, C) as a [B] variable: sum of the four per-step
/// log-softmax values at the target tokens.
template <typename T>
ad::Var<T> sequence_logprobs(const BoundParams<T>& p, std::span<const ModelInput> batch,
                             std::span<const TokenSequence> targets);

// Value-only conveniences, each on a private tape.

template <typename T>
ad::Tensor<T> encode_prefix(const ModelParams<T>& params, const Scene& scene, int class_id);

/// Next-coordinate logits after `prefix_coords` (0..3 tokens).
template <typename T>
std::vector<T> forward_logits(const ModelParams<T>& params, const Scene& scene, int class_id,
                              std::span<const int> prefix_coords);

template <typename T>
T sequence_logprob(const ModelParams<T>& params, const Scene& scene, int class_id, const TokenSequence& t);

/// Batched value-only log-probabilities, chunked to bound memory.
template <typename T>
std::vector<T> sequence_logprob_batch(const ModelParams<T>& params, std::span<const ModelInput> batch,
                                      std::span<const TokenSequence> targets, std::size_t chunk = 64);

/// Checks that `t` is a valid coordinate sequence for this model.
void check_tokens(const ModelConfig& config, const TokenSequence& t);

/// 64-bit FNV-1a over the raw bytes of every tensor; used to assert that a
/// frozen model is untouched.
template <typename T>
std::uint64_t params_hash(const ModelParams<T>& params);

}  // namespace locgen
