// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

// Shared fixtures for the unit and acceptance tests.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "locgen/model.hpp"
#include "locgen/rng.hpp"
#include "locgen/scene.hpp"

namespace locgen::testing {

/// Small model on small images; num_bins tracks image_size.
inline ModelConfig micro_config(int image_size, int d_model, int n_layers, int n_heads, int patch_size,
                                int num_classes = 4, std::uint64_t seed = 7) {
  ModelConfig c;
  c.image_size = image_size;
  c.num_bins = image_size;
  c.patch_size = patch_size;
  c.d_model = d_model;
  c.n_layers = n_layers;
  c.n_heads = n_heads;
  c.num_classes = num_classes;
  c.seed = seed;
  return c;
}

/// Replaces every weight (including the zero-initialized head) with N(0, std^2)
/// so that all code paths carry non-trivial values. Layernorm gains stay
/// around one.
inline ModelParams<float> randomized(ModelParams<float> p, double std, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t t = 0; t < p.tensors.size(); ++t) {
    const bool gain = p.names[t].ends_with(".g");
    for (auto& x : p.tensors[t].data) x = static_cast<float>((gain ? 1.0 : 0.0) + std * rng.normal());
  }
  return p;
}

/// Scene with random channel bits; only the free channel is made consistent.
inline Scene noise_scene(int image_size, int num_classes, std::uint64_t seed) {
  Scene s("noise" + std::to_string(seed), image_size, num_classes, seed);
  Rng rng(seed);
  for (int c = 0; c < s.num_channels() - 1; ++c) {
    for (int y = 0; y < image_size; ++y) {
      for (int x = 0; x < image_size; ++x) s.set(c, y, x, rng.uniform() < 0.2 ? 1 : 0);
    }
  }
  s.refresh_free_channel();
  return s;
}

/// Small synthetic dataset on 64-pixel scenes.
inline DatasetPair small_dataset(int num_train, int num_test, std::uint64_t seed) {
  DatasetConfig c;
  c.num_train = num_train;
  c.num_test = num_test;
  return build_dataset(c, seed);
}

/// Fresh scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("locgen_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

 private:
  static int& counter() {
    static int n = 0;
    return n;
  }
  std::filesystem::path path_;
};

}  // namespace locgen::testing
