// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

#include "a3kv/eviction.hpp"

#include <algorithm>
#include <numeric>

#include "a3kv/error.hpp"

namespace a3kv {

namespace {

std::vector<float> max_pool(std::span<const float> xs, int kernel) {
  const auto half = static_cast<std::ptrdiff_t>(kernel / 2);
  const auto n = static_cast<std::ptrdiff_t>(xs.size());
  std::vector<float> out(xs.size());
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, i - half);
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(n - 1, i + half);
    float m = xs[static_cast<std::size_t>(lo)];
    for (std::ptrdiff_t j = lo + 1; j <= hi; ++j) m = std::max(m, xs[static_cast<std::size_t>(j)]);
    out[static_cast<std::size_t>(i)] = m;
  }
  return out;
}

void copy_row(const HeadKV& src, std::size_t row, HeadKV& dst, std::size_t hd) {
  dst.keys.insert(dst.keys.end(), src.keys.begin() + static_cast<std::ptrdiff_t>(row * hd),
                  src.keys.begin() + static_cast<std::ptrdiff_t>((row + 1) * hd));
  dst.values.insert(dst.values.end(), src.values.begin() + static_cast<std::ptrdiff_t>(row * hd),
                    src.values.begin() + static_cast<std::ptrdiff_t>((row + 1) * hd));
  dst.positions.push_back(src.positions[row]);
}

}  // namespace

void EvictionPolicy::validate() const {
  A3KV_CHECK(kernel >= 1 && kernel % 2 == 1, ErrorKind::kConfig,
             "eviction kernel width must be odd and >= 1");
  A3KV_CHECK(capacity >= 1, ErrorKind::kConfig, "eviction capacity must be >= 1");
}

SnapScores snap_scores(const PatchedCache& cache, const std::vector<Matrix>& window_queries,
                       int kernel) {
  A3KV_CHECK(kernel >= 1 && kernel % 2 == 1, ErrorKind::kConfig,
             "eviction kernel width must be odd and >= 1");
  for (const auto& layer : cache.layers)
    A3KV_CHECK(layer.rope_applied, ErrorKind::kContract, "snap_scores: cache keys are not rotated");
  A3KV_CHECK(window_queries.size() == cache.layers.size(), ErrorKind::kShape,
             "snap_scores: one window query block per layer required");
  const Segment& question = cache.segments.question();
  const auto offsets = cache.segments.document_offsets();
  const auto context = static_cast<std::size_t>(question.start);

  SnapScores out(cache.layers.size());
  for (std::size_t l = 0; l < cache.layers.size(); ++l) {
    const LayerKV& layer = cache.layers[l];
    const Matrix& window = window_queries[l];
    A3KV_CHECK(window.rows > 0, ErrorKind::kInput, "snap_scores: empty observation window");
    A3KV_CHECK(window.rows == static_cast<std::size_t>(question.length), ErrorKind::kShape,
               "snap_scores: window rows must match the question span");
    const auto hd = static_cast<std::size_t>(layer.head_dim);
    out[l].resize(layer.heads.size());
    for (std::size_t h = 0; h < layer.heads.size(); ++h) {
      std::vector<float> summed(context, 0.0f);
      for (std::size_t j = 0; j < window.rows; ++j) {
        const auto w = attention_weights(window.row(j).subspan(h * hd, hd),
                                         question.start + static_cast<std::int32_t>(j),
                                         layer.heads[h]);
        for (std::size_t p = 0; p < context; ++p) summed[p] += w[p];
      }
      const auto pooled = max_pool(summed, kernel);
      auto& dst = out[l][h];
      dst.reserve(offsets.size());
      for (std::int32_t o : offsets) dst.push_back(pooled[static_cast<std::size_t>(o)]);
    }
  }
  return out;
}

SnapScores snap_scores(const PatchedCache& cache, int kernel) {
  return snap_scores(cache, cache.question_queries, kernel);
}

CompactedCache evict(const PatchedCache& cache, const EvictionPolicy& policy) {
  policy.validate();
  const std::int32_t n = cache.length();
  const std::size_t protected_rows =
      static_cast<std::size_t>(cache.segments.system_length() + cache.segments.question_length());

  CompactedCache out;
  out.original_length = n;
  out.origin.resize(cache.layers.size());
  if (policy.capacity >= static_cast<std::size_t>(n)) {
    out.layers = cache.layers;
    for (std::size_t l = 0; l < cache.layers.size(); ++l)
      for (const auto& head : cache.layers[l].heads) out.origin[l].push_back(head.positions);
    return out;
  }
  A3KV_CHECK(policy.capacity > protected_rows, ErrorKind::kConfig,
             "eviction capacity " + std::to_string(policy.capacity) +
                 " must exceed system + question length " + std::to_string(protected_rows));
  const std::size_t budget = policy.capacity - protected_rows;
  const auto offsets = cache.segments.document_offsets();
  const SnapScores scores = snap_scores(cache, policy.kernel);

  std::vector<std::size_t> order(offsets.size());
  for (std::size_t l = 0; l < cache.layers.size(); ++l) {
    const LayerKV& src = cache.layers[l];
    A3KV_CHECK(src.is_dense() && src.length() == static_cast<std::size_t>(n), ErrorKind::kContract,
               "evict: expects an uncompacted cache");
    LayerKV dst = LayerKV::empty(static_cast<int>(src.heads.size()), src.head_dim, src.rope_applied);
    const auto hd = static_cast<std::size_t>(src.head_dim);
    for (std::size_t h = 0; h < src.heads.size(); ++h) {
      const auto& s = scores[l][h];
      std::iota(order.begin(), order.end(), std::size_t{0});
      const std::size_t take = std::min(budget, order.size());
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take),
                        order.end(), [&](std::size_t a, std::size_t b) {
                          if (s[a] != s[b]) return s[a] > s[b];
                          return a < b;
                        });
      std::vector<char> keep(static_cast<std::size_t>(n), 0);
      for (std::int32_t i = 0; i < cache.segments.system_length(); ++i) keep[static_cast<std::size_t>(i)] = 1;
      for (std::int32_t i = cache.segments.question_start(); i < n; ++i) keep[static_cast<std::size_t>(i)] = 1;
      for (std::size_t i = 0; i < take; ++i) keep[static_cast<std::size_t>(offsets[order[i]])] = 1;

      std::vector<std::int32_t> origin;
      for (std::size_t row = 0; row < static_cast<std::size_t>(n); ++row) {
        if (!keep[row]) continue;
        copy_row(src.heads[h], row, dst.heads[h], hd);
        origin.push_back(src.heads[h].positions[row]);
      }
      out.origin[l].push_back(std::move(origin));
    }
    out.layers.push_back(std::move(dst));
  }
  return out;
}

EvictionSummary summarize_eviction(const CompactedCache& cache, const EvictionPolicy& policy) {
  EvictionSummary s;
  s.capacity = policy.capacity;
  s.kernel = policy.kernel;
  s.original_length = cache.original_length;
  for (const auto& layer : cache.layers) {
    std::vector<std::size_t> counts;
    for (const auto& head : layer.heads) counts.push_back(head.size());
    s.retained.push_back(std::move(counts));
  }
  s.resident_floats = cache.resident_floats();
  s.resident_bytes = s.resident_floats * sizeof(float);
  return s;
}

std::vector<float> decode_with_eviction(const ModelWeights& model, CompactedCache& cache,
                                        std::uint32_t last_token, std::int32_t position) {
  auto logits = decode_step(model, cache.layers, last_token, position);
  for (auto& layer : cache.origin)
    for (auto& head : layer) head.push_back(position);
  return logits;
}

}  // namespace a3kv
