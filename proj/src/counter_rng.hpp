// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace a3kv::detail {

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Counter-based stream: the value at (seed, stream, index) depends on nothing
// else, so draws can happen in any order.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream)
      : key_(mix64(seed ^ mix64(stream * 0xD1B54A32D192ED03ull + 1))) {}

  std::uint64_t bits(std::uint64_t index) const { return mix64(key_ ^ mix64(index)); }

  // Uniform in [-bound, bound) with 24 bits of resolution.
  float uniform(std::uint64_t index, double bound) const {
    const double u = static_cast<double>(bits(index) >> 40) * 0x1.0p-24;
    return static_cast<float>((2.0 * u - 1.0) * bound);
  }

 private:
  std::uint64_t key_;
};

}  // namespace a3kv::detail
