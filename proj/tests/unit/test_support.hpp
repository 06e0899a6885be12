// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "a3kv/kv_cache.hpp"
#include "a3kv/model.hpp"

namespace a3kv::test {

inline ModelConfig tiny_config(std::uint64_t seed = 7) {
  ModelConfig c;
  c.n_layers = 4;
  c.n_heads = 2;
  c.head_dim = 8;
  c.d_model = 16;
  c.d_ff = 64;
  c.vocab_size = 32;
  c.seed = seed;
  return c;
}

inline ModelConfig bench_model(std::uint64_t seed = 7, int layers = 8) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = 4;
  c.head_dim = 16;
  c.d_model = 64;
  c.d_ff = 256;
  c.vocab_size = 258;
  c.seed = seed;
  return c;
}

inline std::vector<std::uint32_t> random_tokens(std::size_t n, int vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::uint32_t> out(n);
  for (auto& t : out) t = static_cast<std::uint32_t>(rng() % static_cast<std::uint64_t>(vocab));
  return out;
}

inline double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i)
    m = std::max(m, std::fabs(static_cast<double>(a[i]) - b[i]));
  return a.size() == b.size() ? m : INFINITY;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows || a.cols != b.cols) return INFINITY;
  return max_abs_diff(a.data, b.data);
}

}  // namespace a3kv::test
