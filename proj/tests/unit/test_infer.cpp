// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <vector>

#include "locgen/infer.hpp"
#include "support.hpp"

using namespace locgen;
using testing::micro_config;
using testing::noise_scene;
using testing::randomized;

namespace {

void check_close(std::span<const float> got, const std::vector<double>& want, double tol) {
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got[i] - want[i]) < tol * (1.0 + std::abs(want[i])));
}

}  // namespace

TEST_CASE("incremental decoder matches the full forward pass") {
  for (const auto& c : {micro_config(16, 16, 2, 2, 4), micro_config(32, 32, 3, 4, 8, 3, 2)}) {
    const ModelParams<float> p = randomized(init_params(c), 0.15, 5);
    const ModelParams<double> pd = p.cast<double>();
    const Scene s = noise_scene(c.image_size, c.num_classes, 3);
    SceneDecoder dec(p, s, 1);
    const std::vector<std::vector<int>> prefixes{{}, {3}, {3, 9}, {3, 9, 12}, {0, 0, 0}, {5}, {5, 1}};
    for (const auto& pre : prefixes) {
      const auto want = forward_logits(pd, s, 1, pre);
      check_close(dec.logits(pre), want, 1e-4);
    }
  }
}

TEST_CASE("memoized logits do not depend on visiting order") {
  const ModelConfig c = micro_config(16, 16, 2, 2, 4);
  const ModelParams<float> p = randomized(init_params(c), 0.2, 6);
  const Scene s = noise_scene(16, 4, 8);
  SceneDecoder a(p, s, 2), b(p, s, 2);
  const std::vector<int> target{4, 7, 11};
  const std::vector<float> direct(a.logits(target).begin(), a.logits(target).end());
  b.logits(std::vector<int>{1});
  b.logits(std::vector<int>{4, 2});
  b.logits(std::vector<int>{4, 7, 1});
  const auto later = b.logits(target);
  CHECK(std::vector<float>(later.begin(), later.end()) == direct);
}

TEST_CASE("every visited prefix is cached exactly once") {
  const ModelConfig c = micro_config(16, 16, 1, 2, 4);
  const ModelParams<float> p = randomized(init_params(c), 0.2, 6);
  const Scene s = noise_scene(16, 4, 8);
  SceneDecoder d(p, s, 0);
  const std::size_t base = d.cached_prefixes();
  d.logits(std::vector<int>{1, 2, 3});
  CHECK(d.cached_prefixes() == base + 3);
  d.logits(std::vector<int>{1, 2, 3});
  d.logits(std::vector<int>{1, 2});
  CHECK(d.cached_prefixes() == base + 3);
  d.logits(std::vector<int>{1, 5});
  CHECK(d.cached_prefixes() == base + 4);
  d.logits(std::vector<int>{});
  CHECK(d.cached_prefixes() == base + 4);
}
