// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

// One-shot KV eviction after the first generated token. System-prompt and
// question rows are always kept; the remaining C - |S| - |Q| slots of every
// layer and head go to the document rows the question window attends to
// most, after max-pooling those scores along the position axis.

#pragma once

#include <cstdint>
#include <vector>

#include "a3kv/fusion.hpp"
#include "a3kv/model.hpp"

namespace a3kv {

struct EvictionPolicy {
  std::size_t capacity = 1024;
  int kernel = 7;  // odd, >= 1
  bool enabled = true;

  void validate() const;
};

// Rows kept per layer and head, each at its original position and with its
// original (rotated) key.
struct CompactedCache {
  KVCache layers;
  // origin[layer][head][i]: original offset of retained row i. Rows appended
  // during decode extend these maps with their own positions.
  std::vector<std::vector<std::vector<std::int32_t>>> origin;
  std::int32_t original_length = 0;

  std::size_t resident_floats() const { return a3kv::resident_floats(layers); }
};

// [layer][head][document token], aligned with SegmentMap::document_offsets().
using SnapScores = std::vector<std::vector<std::vector<float>>>;

// For each layer and head: attention of every window row over the positions
// it can see, summed over window rows, restricted to the context before the
// window, max-pooled with the given kernel (stride 1, edges clamped) and
// finally read out at the document offsets.
SnapScores snap_scores(const PatchedCache& cache, const std::vector<Matrix>& window_queries,
                       int kernel);
SnapScores snap_scores(const PatchedCache& cache, int kernel);

CompactedCache evict(const PatchedCache& cache, const EvictionPolicy& policy);

EvictionSummary summarize_eviction(const CompactedCache& cache, const EvictionPolicy& policy);

// Decode against the retained rows; new rows are appended and never evicted.
std::vector<float> decode_with_eviction(const ModelWeights& model, CompactedCache& cache,
                                        std::uint32_t last_token, std::int32_t position);

}  // namespace a3kv
