// Copyright 2026 The locgen Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <limits>

namespace locgen {

/// SplitMix64 finalizer; used to derive stream keys.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Philox4x32-10 counter-based generator.
///
/// The output is a pure function of (key, counter), so a stream can be split
/// into independent substreams without sharing state: `split(i)` derives a
/// new key from the current key and `i`. All randomness in the project is
/// funneled through this type so results do not depend on the standard
/// library's distribution implementations.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0) : key_(mix64(seed)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  /// Independent child stream. Does not advance this stream.
  Rng split(std::uint64_t stream) const {
    Rng child;
    child.key_ = mix64(key_ ^ mix64(stream + 0x632be59bd9b4e019ULL));
    return child;
  }

  result_type operator()();

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [lo, hi] (inclusive), unbiased.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  /// Standard normal via Box-Muller.
  double normal();

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int used_ = 4;  // 32-bit words of block_ consumed
  double spare_normal_ = 0.0;
  bool has_spare_ = false;

  std::uint32_t next32();
};

/// One Philox4x32-10 block for the given counter and key. Exposed for tests
/// against the published known-answer vectors.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                        std::array<std::uint32_t, 2> key);

}  // namespace locgen
