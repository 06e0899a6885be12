// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

// Analytic prefill cost model, counting one multiply-add as 2 FLOPs.
//
//   row(d, d_ff)  = 8 d^2 + 6 d d_ff            projections + SwiGLU
//   attn(p)       = 4 d (p + 1)                  QK^T and AV for a row at p
//   layer(n)      = n row + 2 d n (n + 1)        all rows 0..n-1
//   head          = 2 d vocab                    last-row logits
//
//   vanilla       = L layer(n) + head
//   fused         = 2 layer(n) + (L - 2) rows(Re ∪ Q) + head
//   rows(Re ∪ Q)  = (|Re| + |Q|) row + |Re| attn_mean + sum_{p=m}^{n-1} attn(p)
//
// with m = n - |Q| and attn_mean = 2 d (m + 1), the mean attention cost of a
// row spread uniformly over [0, m). Concatenate-as-is computes only the
// question rows at every layer.

#pragma once

#include <cstddef>
#include <cstdint>

#include "a3kv/fusion.hpp"
#include "a3kv/model.hpp"

namespace a3kv {

double row_flops(const ModelConfig& config);
double attention_flops(const ModelConfig& config, std::int64_t position);
double vanilla_flops(std::int32_t n, const ModelConfig& config);
double fused_flops(std::int32_t n, std::int32_t question_len, std::size_t recompute_rows,
                   const ModelConfig& config);
double full_reuse_flops(std::int32_t n, std::int32_t question_len, const ModelConfig& config);

// Plan-level estimate. |Re| is min(round(r n), n - |Q|) for the ratio-driven
// strategies, 0 for `none`, and for `head_tail` 2k per 512-token document
// chunk.
double flops_estimate(const FusionPlan& plan, std::int32_t n, std::int32_t question_len,
                      const ModelConfig& config);

}  // namespace a3kv
