// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <functional>

#include "locgen/error.hpp"
#include "locgen/model.hpp"
#include "support.hpp"

using namespace locgen;
using testing::micro_config;
using testing::noise_scene;
using testing::randomized;

namespace {

double log_softmax_at(const std::vector<double>& logits, int k) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0;
  for (double v : logits) z += std::exp(v - mx);
  return logits[k] - mx - std::log(z);
}

}  // namespace

TEST_CASE("desk configuration: vocabulary, prefix length, parameter count") {
  const ModelConfig c;
  CHECK(c.vocab_size() == 66);
  CHECK(c.sos_token() == 64);
  CHECK(c.eos_token() == 65);
  CHECK(c.prefix_length() == 65);
  const ModelParams<float> p = init_params(c);
  // Hand count: patch projection + bias, patch positions, class table, token
  // table, token positions (SOS and three fed coordinates), per-block (two
  // layernorms, qkv with query and value biases, output projection, 4x MLP),
  // final layernorm, head.
  const std::size_t d = 64, V = 66, channels = 6, patch_dim = channels * 8 * 8, patches = 64, classes = 4;
  const std::size_t block = 2 * d + (d * 3 * d + 2 * d) + (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
  const std::size_t want = patch_dim * d + d + patches * d + classes * d + V * d + 4 * d + 2 * block + 2 * d + d * V + V;
  CHECK(p.parameter_count() == want);
  CHECK(want == 137730);
}

TEST_CASE("configuration invariants are enforced") {
  ModelConfig c;
  c.patch_size = 7;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = ModelConfig{};
  c.n_heads = 5;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = ModelConfig{};
  c.num_bins = 32;
  CHECK_THROWS_AS(init_params(c), UsageError);
}

TEST_CASE("init_params: GPT-2 statistics, zero head, determinism") {
  const ModelConfig c;
  const ModelParams<float> a = init_params(c), b = init_params(c);
  CHECK(params_hash(a) == params_hash(b));
  ModelConfig c2 = c;
  c2.seed = 1;
  CHECK(params_hash(init_params(c2)) != params_hash(a));
  for (float v : a.get("head.w").data) CHECK(v == 0.0f);
  for (float v : a.get("blk0.ln1.g").data) CHECK(v == 1.0f);
  for (float v : a.get("blk1.mlp.b1").data) CHECK(v == 0.0f);
  const auto& w = a.get("blk0.mlp.w1").data;
  double s = 0, s2 = 0;
  for (float v : w) {
    s += v;
    s2 += static_cast<double>(v) * v;
  }
  CHECK(std::abs(s / w.size()) < 0.002);
  CHECK(std::sqrt(s2 / w.size()) == doctest::Approx(0.02).epsilon(0.05));
  CHECK(a.all_finite());
}

TEST_CASE("zero head: uniform next-token distribution and analytic log-likelihood") {
  const ModelConfig c;
  const ModelParams<float> p = init_params(c);
  const Scene s = generate_scene(SceneConfig{}, 3);
  const std::vector<int> none, some{5, 9, 40};
  for (const auto& prefix : {none, some}) {
    const auto logits = forward_logits(p, s, 1, prefix);
    CHECK(logits.size() == 66);
    for (float v : logits) CHECK(v == 0.0f);
  }
  const TokenSequence t{{3, 4, 20, 30}, 64};
  CHECK(sequence_logprob(p, s, 2, t) == doctest::Approx(-4 * std::log(66.0)).epsilon(1e-6));
  CHECK(-4 * std::log(66.0) == doctest::Approx(-16.7586).epsilon(1e-5));
}

TEST_CASE("prefix embeddings: length and locality") {
  const ModelConfig c;
  const ModelParams<float> p = randomized(init_params(c), 0.1, 1);
  Scene s = generate_scene(SceneConfig{}, 4);
  const auto base = encode_prefix(p, s, 0);
  CHECK(base.shape == ad::Shape{65, 64});

  // Flip one pixel inside patch (row 2, col 5).
  Scene t = s;
  const int y = 2 * 8 + 3, x = 5 * 8 + 1;
  t.set(t.support_channel(), y, x, 1 - t.at(t.support_channel(), y, x));
  t.refresh_free_channel();
  const auto changed = encode_prefix(p, t, 0);
  const int hit = 2 * 8 + 5;
  for (int r = 0; r < 65; ++r) {
    bool same = true;
    for (int k = 0; k < 64; ++k) same &= base.data[r * 64 + k] == changed.data[r * 64 + k];
    CHECK(same == (r != hit));
  }
  // A class swap touches only the final (class) row.
  const auto other = encode_prefix(p, s, 3);
  for (int r = 0; r < 65; ++r) {
    bool same = true;
    for (int k = 0; k < 64; ++k) same &= base.data[r * 64 + k] == other.data[r * 64 + k];
    CHECK(same == (r != 64));
  }
  // Channel-count mismatch is rejected.
  const Scene wrong("w", 64, 2, 0);
  CHECK_THROWS_AS(encode_prefix(p, wrong, 0), UsageError);
}

TEST_CASE("decoder: causal, prefix dependent, definitional log-probability") {
  const ModelConfig c = micro_config(16, 16, 2, 2, 4);
  const ModelParams<float> pf = randomized(init_params(c), 0.3, 2);
  const ModelParams<double> p = pf.cast<double>();
  const Scene s = noise_scene(16, 4, 5);
  const ModelInput in{&s, 1};

  SUBCASE("logits at step k ignore coordinates at positions >= k") {
    const std::vector<std::vector<int>> a{{3, 7, 9}}, b{{3, 7, 12}}, e{{3, 2, 12}};
    ad::Tape<double> tape;
    const auto bp = bind(tape, p, false);
    auto la = decoder_logits(bp, std::span<const ModelInput>(&in, 1), std::span<const std::vector<int>>(a));
    auto lb = decoder_logits(bp, std::span<const ModelInput>(&in, 1), std::span<const std::vector<int>>(b));
    auto le = decoder_logits(bp, std::span<const ModelInput>(&in, 1), std::span<const std::vector<int>>(e));
    const int V = c.vocab_size();
    const auto va = la.value(), vb = lb.value(), ve = le.value();
    for (int i = 0; i < 3 * V; ++i) CHECK(va[i] == vb[i]);  // positions SOS, b1, b2
    bool last_differs = false;
    for (int i = 3 * V; i < 4 * V; ++i) last_differs |= va[i] != vb[i];
    CHECK(last_differs);
    bool step3_differs = false;  // changing b2 changes the logits at the b2 position
    for (int i = 2 * V; i < 3 * V; ++i) step3_differs |= va[i] != ve[i];
    CHECK(step3_differs);
  }
  SUBCASE("changing b1 changes the step-2 logits") {
    const auto l1 = forward_logits(p, s, 1, std::vector<int>{2});
    const auto l2 = forward_logits(p, s, 1, std::vector<int>{11});
    CHECK(l1 != l2);
  }
  SUBCASE("sequence_logprob is the sum of per-step log-softmax values") {
    const TokenSequence t{{2, 5, 9, 14}, 16};
    double want = 0;
    std::vector<int> prefix;
    for (int k = 0; k < 4; ++k) {
      want += log_softmax_at(forward_logits(p, s, 1, prefix), t.tokens[k]);
      prefix.push_back(t.tokens[k]);
    }
    CHECK(sequence_logprob(p, s, 1, t) == doctest::Approx(want).epsilon(1e-12));
    CHECK(sequence_logprob(p, s, 1, t) <= 0.0);
  }
  SUBCASE("batched scoring matches single scoring") {
    std::vector<ModelInput> batch(5, in);
    std::vector<TokenSequence> ts;
    for (int i = 0; i < 5; ++i) ts.push_back({{i, i + 1, i + 3, i + 5}, 16});
    const auto lp = sequence_logprob_batch(pf, std::span<const ModelInput>(batch), std::span<const TokenSequence>(ts), 2);
    for (int i = 0; i < 5; ++i) CHECK(lp[i] == doctest::Approx(sequence_logprob(pf, s, 1, ts[i])).epsilon(1e-5));
  }
  SUBCASE("invalid tokens are rejected") {
    CHECK_THROWS_AS(forward_logits(p, s, 1, std::vector<int>{16}), UsageError);
    CHECK_THROWS_AS(forward_logits(p, s, 1, std::vector<int>{1, 2, 3, 4}), UsageError);
    CHECK_THROWS_AS(sequence_logprob(p, s, 1, TokenSequence{{0, 0, 16, 1}, 16}), UsageError);
    CHECK_THROWS_AS(sequence_logprob(p, s, 1, TokenSequence{{0, 0, 1, 1}, 8}), UsageError);
  }
}

TEST_CASE("chain rule normalization over the whole vocabulary on a 4-bin model") {
  // Every path either spells four coordinates or leaves the coordinate
  // alphabet (SOS / EOS) at some step; the masses of those events sum to one.
  const ModelConfig c = micro_config(4, 8, 1, 2, 2, 4, 3);
  const ModelParams<double> p = randomized(init_params(c), 0.1, 9).cast<double>();
  const Scene s = noise_scene(4, 4, 1);
  const int nb = c.num_bins, V = c.vocab_size();
  auto probs = [&](const std::vector<int>& prefix) {
    const auto lg = forward_logits(p, s, 2, prefix);
    std::vector<double> out(V);
    for (int k = 0; k < V; ++k) out[k] = std::exp(log_softmax_at(lg, k));
    return out;
  };
  double complete = 0, escaped = 0;
  std::function<void(std::vector<int>&, double)> walk = [&](std::vector<int>& prefix, double mass) {
    const auto pr = probs(prefix);
    escaped += mass * (pr[nb] + pr[nb + 1]);
    for (int k = 0; k < nb; ++k) {
      if (prefix.size() == 3) {
        const TokenSequence t{{prefix[0], prefix[1], prefix[2], k}, nb};
        const double lp = sequence_logprob(p, s, 2, t);
        CHECK(lp == doctest::Approx(std::log(mass * pr[k])).epsilon(1e-10));
        complete += std::exp(lp);
      } else {
        prefix.push_back(k);
        walk(prefix, mass * pr[k]);
        prefix.pop_back();
      }
    }
  };
  std::vector<int> prefix;
  walk(prefix, 1.0);
  CHECK(complete + escaped == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(complete > 0.1);
}

TEST_CASE("forward passes are bit-reproducible") {
  const ModelConfig c = micro_config(16, 16, 2, 2, 4);
  const ModelParams<float> p = randomized(init_params(c), 0.2, 4);
  const Scene s = noise_scene(16, 4, 2);
  CHECK(forward_logits(p, s, 0, std::vector<int>{1, 2}) == forward_logits(p, s, 0, std::vector<int>{1, 2}));
}
