// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

#include "a3kv/flops.hpp"

#include <algorithm>
#include <cmath>

#include "a3kv/error.hpp"
#include "a3kv/kv_cache.hpp"

namespace a3kv {

namespace {

double head_flops(const ModelConfig& c) {
  return 2.0 * c.d_model * static_cast<double>(c.vocab_size);
}

// sum_{p=lo}^{hi-1} attn(p)
double attention_span(const ModelConfig& c, std::int64_t lo, std::int64_t hi) {
  if (hi <= lo) return 0.0;
  const double count = static_cast<double>(hi - lo);
  const double first = static_cast<double>(lo + 1);
  const double last = static_cast<double>(hi);
  return 4.0 * c.d_model * (first + last) * count / 2.0;
}

double full_layer(std::int32_t n, const ModelConfig& c) {
  return n * row_flops(c) + attention_span(c, 0, n);
}

}  // namespace

double row_flops(const ModelConfig& c) {
  const double d = c.d_model;
  return 8.0 * d * d + 6.0 * d * c.d_ff;
}

double attention_flops(const ModelConfig& c, std::int64_t position) {
  return 4.0 * c.d_model * static_cast<double>(position + 1);
}

double vanilla_flops(std::int32_t n, const ModelConfig& c) {
  return c.n_layers * full_layer(n, c) + head_flops(c);
}

double fused_flops(std::int32_t n, std::int32_t question_len, std::size_t recompute_rows,
                   const ModelConfig& c) {
  A3KV_CHECK(question_len >= 0 && question_len <= n, ErrorKind::kInput,
             "fused_flops: question longer than input");
  const std::int32_t m = n - question_len;
  const double re = static_cast<double>(std::min<std::size_t>(recompute_rows,
                                                              static_cast<std::size_t>(m)));
  const double rows = (re + question_len) * row_flops(c) + re * 2.0 * c.d_model * (m + 1.0) +
                      attention_span(c, m, n);
  const int full = std::min(c.n_layers, 2);
  return full * full_layer(n, c) + (c.n_layers - full) * rows + head_flops(c);
}

double full_reuse_flops(std::int32_t n, std::int32_t question_len, const ModelConfig& c) {
  const std::int32_t m = n - question_len;
  return c.n_layers * (question_len * row_flops(c) + attention_span(c, m, n)) + head_flops(c);
}

double flops_estimate(const FusionPlan& plan, std::int32_t n, std::int32_t question_len,
                      const ModelConfig& c) {
  const std::size_t context = static_cast<std::size_t>(n - question_len);
  switch (plan.strategy) {
    case Strategy::kVanilla:
      return vanilla_flops(n, c);
    case Strategy::kFullReuse:
      return full_reuse_flops(n, question_len, c);
    case Strategy::kNone:
      return fused_flops(n, question_len, 0, c);
    case Strategy::kHeadTail: {
      const std::size_t docs = (context + kDefaultChunkLen - 1) / kDefaultChunkLen;
      const std::size_t re = std::min(context, docs * 2 * static_cast<std::size_t>(plan.head_tail_k));
      return fused_flops(n, question_len, re, c);
    }
    case Strategy::kKvDiff:
    case Strategy::kAttentionAware:
      return fused_flops(n, question_len,
                         std::min(context, static_cast<std::size_t>(std::llround(plan.r * n))), c);
  }
  return 0.0;
}

}  // namespace a3kv
