// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

// Attention-aware KV fusion and the reuse baselines it is compared against.
//
// Every strategy except `full` and `vanilla` runs the same pipeline:
//
//   1. load chunk KV, concatenate, rotate keys at global offsets;
//   2. layer 0 for all n rows against the fused layer-0 cache, giving X_1;
//   3. true Q/K/V for all rows at layer 1, written over the layer-1 cache;
//   4. pick the recomputation set Re from layer-1 quantities;
//   5. for rows Re ∪ Q only, propagate layer by layer: at each layer l >= 2
//      the rows' fresh K/V (keys rotated at global positions) overwrite the
//      cache before those rows attend to the whole patched cache.
//
// Strategies differ only in step 4: `none` selects nothing, `kv_diff`
// selects the largest layer-1 value deviations, `head_tail` the first and
// last k tokens of each document, and `attention_aware` the document tokens
// that the question attends to most at layer 1. `full` skips position
// recovery and layers 0/1, leaving each chunk rotated from position 0 and
// computing only the question rows.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "a3kv/kv_cache.hpp"
#include "a3kv/model.hpp"

namespace a3kv {

enum class Strategy { kVanilla, kFullReuse, kNone, kKvDiff, kHeadTail, kAttentionAware };

std::string_view strategy_name(Strategy s);
// Accepts vanilla, full, none, kv_diff, head_tail, attention_aware.
Strategy parse_strategy(std::string_view name);

struct RecomputeSet {
  std::vector<std::int32_t> indices;  // ascending global offsets
  std::vector<float> scores;          // per document token, in offset order
  Strategy strategy = Strategy::kNone;
  std::size_t budget = 0;

  bool operator==(const RecomputeSet&) const = default;
};

struct FusionPlan {
  Strategy strategy = Strategy::kAttentionAware;
  double r = 0.15;
  int head_tail_k = 20;

  void validate() const;
};

// Fused cache after a fused prefill: n rows per layer (question included).
// Layers 0 and 1 are exact; at layers >= 2 only `patched_offsets` were
// rewritten.
struct PatchedCache {
  KVCache layers;
  SegmentMap segments;
  std::vector<std::uint32_t> token_ids;
  bool rope_recovered = false;
  std::vector<std::int32_t> patched_offsets;
  std::vector<Matrix> question_queries;  // per layer, rotated, |Q| × d_model

  std::int32_t length() const { return static_cast<std::int32_t>(token_ids.size()); }
};

struct PhaseTimings {
  double load_ms = 0;
  double concat_ms = 0;
  double recover_ms = 0;
  double full_layers_ms = 0;
  double select_ms = 0;
  double recompute_ms = 0;
  double total_ms = 0;
};

struct EvictionSummary {
  std::size_t capacity = 0;
  int kernel = 0;
  std::int32_t original_length = 0;
  std::vector<std::vector<std::size_t>> retained;  // [layer][head]
  std::size_t resident_floats = 0;
  std::size_t resident_bytes = 0;
};

struct FusionTrace {
  Strategy strategy = Strategy::kAttentionAware;
  double r = 0;
  int head_tail_k = 0;
  std::int32_t n = 0;
  std::size_t p_requested = 0;  // round(r * n)
  std::size_t p = 0;            // after clamping to the document tokens
  bool clamped = false;
  std::vector<std::int32_t> selected;
  PhaseTimings timings;
  double flops_prefill = 0;
  double flops_vanilla = 0;
  std::optional<EvictionSummary> eviction;
};

std::string trace_to_json(const FusionTrace& trace, int indent = 2);

struct FusionRequest {
  std::vector<Digest> chunk_ids;  // system chunk first, then documents
  std::vector<std::uint32_t> question;
};

struct FusionResult {
  PatchedCache cache;
  std::vector<float> logits;  // first generated token
  FusionTrace trace;
  RecomputeSet recompute;
};

// Question-relevance of every document token: softmax of each question row
// over all positions it may see, restricted to document offsets, averaged over
// heads and summed over question rows. Aligned with document_offsets().
std::vector<float> score_tokens(const Matrix& question_queries,
                                std::span<const std::int32_t> question_positions,
                                const LayerKV& true_keys, const SegmentMap& segments);

// p = round(r * n) clamped to [0, documents].
std::size_t recompute_budget(double r, std::int32_t n, std::size_t document_tokens);

// The p highest-scoring document offsets (scores aligned with
// document_offsets()); ties go to the lower offset.
RecomputeSet select_top(std::span<const float> scores, std::size_t p,
                        const SegmentMap& segments, Strategy tag);

// Top-p document offsets by score with p = recompute_budget(r, n, ...).
RecomputeSet select_recompute(std::span<const float> scores, double r, std::int32_t n,
                              const SegmentMap& segments);

// Top-p document offsets by the L2 norm of (v_cat - v_true) across heads.
RecomputeSet select_kv_diff(const LayerKV& v_cat, const LayerKV& v_true, double r,
                            std::int32_t n, const SegmentMap& segments);

// First and last k tokens of every document span.
RecomputeSet select_head_tail(const SegmentMap& segments, int k);

// |selected ∩ oracle| / p, with p = 0 defined as 1.
double hit_rate(const RecomputeSet& selected, const RecomputeSet& oracle);

FusionResult fused_prefill(const ModelWeights& model, const ChunkSource& store,
                           const FusionRequest& request, const FusionPlan& plan);

// No reuse: full prefill of system ∥ documents ∥ question, returned in the
// same shape as a fused result so decode and metrics treat it uniformly.
// When `all_queries` is given it receives every layer's rotated queries for
// all rows.
FusionResult vanilla_prefill(const ModelWeights& model,
                             std::span<const std::vector<std::uint32_t>> chunks,
                             std::span<const std::uint32_t> question,
                             std::vector<Matrix>* all_queries = nullptr);

}  // namespace a3kv
