// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

#include "a3kv/fusion.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "a3kv/error.hpp"
#include "a3kv/flops.hpp"

namespace a3kv {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// Highest scores first, lower offset on ties; result sorted by offset.
std::vector<std::int32_t> top_offsets(std::span<const float> scores,
                                      std::span<const std::int32_t> offsets, std::size_t p) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  p = std::min(p, order.size());
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return offsets[a] < offsets[b];
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(p), order.end(),
                    better);
  std::vector<std::int32_t> out;
  out.reserve(p);
  for (std::size_t i = 0; i < p; ++i) out.push_back(offsets[order[i]]);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> as_slots(std::span<const std::int32_t> offsets) {
  return {offsets.begin(), offsets.end()};
}

Matrix tail_rows(const Matrix& m, std::size_t count) {
  Matrix out(count, m.cols);
  std::copy(m.data.end() - static_cast<std::ptrdiff_t>(count * m.cols), m.data.end(),
            out.data.begin());
  return out;
}

// Runs layer `layer` for the rows at `offsets` (hidden states `x`): their
// fresh K/V overwrite the cache slots, then they attend to the whole layer.
Matrix step_rows(const ModelWeights& model, PatchedCache& cache, int layer,
                 std::span<const std::int32_t> offsets, const Matrix& x,
                 std::size_t question_rows) {
  const LayerWeights& lw = model.layers[static_cast<std::size_t>(layer)];
  const Matrix xn = rms_norm(x, lw.attn_norm);
  Matrix q = matmul(xn, lw.wq);
  Matrix k = matmul(xn, lw.wk);
  const Matrix v = matmul(xn, lw.wv);
  rotate_heads(q, offsets, model.config);
  rotate_heads(k, offsets, model.config);
  LayerKV& kv = cache.layers[static_cast<std::size_t>(layer)];
  write_rows(kv, as_slots(offsets), k, v);
  const Matrix attn = attention(q, offsets, kv);
  cache.question_queries[static_cast<std::size_t>(layer)] = tail_rows(q, question_rows);
  return finish_layer(lw, x, attn);
}

void validate_question(std::span<const std::uint32_t> question) {
  A3KV_CHECK(!question.empty(), ErrorKind::kInput, "question must not be empty");
}

}  // namespace

std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kVanilla: return "vanilla";
    case Strategy::kFullReuse: return "full";
    case Strategy::kNone: return "none";
    case Strategy::kKvDiff: return "kv_diff";
    case Strategy::kHeadTail: return "head_tail";
    case Strategy::kAttentionAware: return "attention_aware";
  }
  return "unknown";
}

Strategy parse_strategy(std::string_view name) {
  for (Strategy s : {Strategy::kVanilla, Strategy::kFullReuse, Strategy::kNone,
                     Strategy::kKvDiff, Strategy::kHeadTail, Strategy::kAttentionAware}) {
    if (strategy_name(s) == name) return s;
  }
  throw Error(ErrorKind::kConfig, "unknown strategy '" + std::string(name) + "'");
}

void FusionPlan::validate() const {
  A3KV_CHECK(r >= 0.0 && r <= 1.0, ErrorKind::kConfig, "recompute ratio r must lie in [0, 1]");
  A3KV_CHECK(head_tail_k >= 0, ErrorKind::kConfig, "head/tail width k must be >= 0");
}

std::vector<float> score_tokens(const Matrix& question_queries,
                                std::span<const std::int32_t> question_positions,
                                const LayerKV& true_keys, const SegmentMap& segments) {
  A3KV_CHECK(question_queries.rows > 0, ErrorKind::kInput, "score_tokens: empty question span");
  A3KV_CHECK(question_positions.size() == question_queries.rows, ErrorKind::kShape,
             "score_tokens: one position per question row required");
  const auto hd = static_cast<std::size_t>(true_keys.head_dim);
  const std::size_t n_heads = true_keys.heads.size();
  A3KV_CHECK(question_queries.cols == n_heads * hd, ErrorKind::kShape,
             "score_tokens: query width does not match key heads");

  const auto offsets = segments.document_offsets();
  std::vector<float> scores(offsets.size(), 0.0f);
  const float head_weight = 1.0f / static_cast<float>(n_heads);
  for (std::size_t j = 0; j < question_queries.rows; ++j) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const auto w = attention_weights(question_queries.row(j).subspan(h * hd, hd),
                                       question_positions[j], true_keys.heads[h]);
      for (std::size_t i = 0; i < offsets.size(); ++i)
        scores[i] += w[static_cast<std::size_t>(offsets[i])] * head_weight;
    }
  }
  return scores;
}

std::size_t recompute_budget(double r, std::int32_t n, std::size_t document_tokens) {
  const auto p = std::llround(r * static_cast<double>(n));
  return std::min(static_cast<std::size_t>(std::max<long long>(p, 0)), document_tokens);
}

RecomputeSet select_top(std::span<const float> scores, std::size_t p,
                        const SegmentMap& segments, Strategy tag) {
  const auto offsets = segments.document_offsets();
  A3KV_CHECK(scores.size() == offsets.size(), ErrorKind::kContract,
             "select_top: one score per document token required");
  RecomputeSet set;
  set.strategy = tag;
  set.budget = std::min(p, offsets.size());
  set.scores.assign(scores.begin(), scores.end());
  set.indices = top_offsets(scores, offsets, set.budget);
  return set;
}

RecomputeSet select_recompute(std::span<const float> scores, double r, std::int32_t n,
                              const SegmentMap& segments) {
  A3KV_CHECK(r >= 0.0 && r <= 1.0, ErrorKind::kConfig, "recompute ratio r must lie in [0, 1]");
  return select_top(scores, recompute_budget(r, n, segments.document_token_count()), segments,
                    Strategy::kAttentionAware);
}

RecomputeSet select_kv_diff(const LayerKV& v_cat, const LayerKV& v_true, double r,
                            std::int32_t n, const SegmentMap& segments) {
  A3KV_CHECK(v_cat.heads.size() == v_true.heads.size() && v_cat.head_dim == v_true.head_dim,
             ErrorKind::kContract, "select_kv_diff: value caches differ in head layout");
  const auto offsets = segments.document_offsets();
  const auto hd = static_cast<std::size_t>(v_cat.head_dim);
  std::vector<float> dev(offsets.size(), 0.0f);
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    const auto o = static_cast<std::size_t>(offsets[i]);
    double ss = 0.0;
    for (std::size_t h = 0; h < v_cat.heads.size(); ++h) {
      const HeadKV& a = v_cat.heads[h];
      const HeadKV& b = v_true.heads[h];
      A3KV_CHECK(o < a.size() && o < b.size(), ErrorKind::kContract,
                 "select_kv_diff: value caches do not cover the document offsets");
      for (std::size_t c = 0; c < hd; ++c) {
        const double diff = static_cast<double>(a.values[o * hd + c]) - b.values[o * hd + c];
        ss += diff * diff;
      }
    }
    dev[i] = static_cast<float>(std::sqrt(ss));
  }
  RecomputeSet set;
  set.strategy = Strategy::kKvDiff;
  set.budget = recompute_budget(r, n, offsets.size());
  set.indices = top_offsets(dev, offsets, set.budget);
  set.scores = std::move(dev);
  return set;
}

RecomputeSet select_head_tail(const SegmentMap& segments, int k) {
  A3KV_CHECK(k >= 0, ErrorKind::kConfig, "head/tail width k must be >= 0");
  RecomputeSet set;
  set.strategy = Strategy::kHeadTail;
  for (const Segment& doc : segments.documents()) {
    for (std::int32_t i = 0; i < doc.length; ++i) {
      if (i < k || i >= doc.length - k) set.indices.push_back(doc.start + i);
    }
  }
  set.budget = set.indices.size();
  return set;
}

double hit_rate(const RecomputeSet& selected, const RecomputeSet& oracle) {
  const std::size_t p = selected.indices.size();
  A3KV_CHECK(oracle.indices.size() == p, ErrorKind::kContract,
             "hit_rate: selection and oracle budgets differ");
  if (p == 0) return 1.0;
  std::vector<std::int32_t> common;
  std::set_intersection(selected.indices.begin(), selected.indices.end(),
                        oracle.indices.begin(), oracle.indices.end(),
                        std::back_inserter(common));
  return static_cast<double>(common.size()) / static_cast<double>(p);
}

FusionResult fused_prefill(const ModelWeights& model, const ChunkSource& store,
                           const FusionRequest& request, const FusionPlan& plan) {
  plan.validate();
  validate_question(request.question);
  A3KV_CHECK(!request.chunk_ids.empty(), ErrorKind::kInput,
             "fused_prefill: at least a system chunk is required");
  const ModelConfig& cfg = model.config;
  const auto t_start = Clock::now();

  std::vector<ChunkKV> chunks;
  chunks.reserve(request.chunk_ids.size());
  for (const Digest& id : request.chunk_ids) chunks.push_back(store.load(id));
  const double load_ms = ms_since(t_start);

  if (plan.strategy == Strategy::kVanilla) {
    std::vector<std::vector<std::uint32_t>> tokens;
    for (const auto& c : chunks) tokens.push_back(c.token_ids);
    FusionResult r = vanilla_prefill(model, tokens, request.question);
    r.trace.timings.load_ms = load_ms;
    r.trace.timings.total_ms = ms_since(t_start);
    return r;
  }
  for (const auto& c : chunks) {
    A3KV_CHECK(c.fingerprint == model_fingerprint(cfg), ErrorKind::kIncompatible,
               "chunk " + to_hex(c.id) + " was produced by a different model");
  }

  FusionResult result;
  FusionTrace& trace = result.trace;
  trace.strategy = plan.strategy;
  trace.r = plan.r;
  trace.head_tail_k = plan.head_tail_k;
  trace.timings.load_ms = load_ms;

  const bool full_reuse = plan.strategy == Strategy::kFullReuse;
  auto t = Clock::now();
  if (full_reuse) {
    for (auto& c : chunks) c = localize_chunk(std::move(c), cfg);
  }
  FusedCache fused = concat_chunks(chunks);
  chunks.clear();
  trace.timings.concat_ms = ms_since(t);

  t = Clock::now();
  if (!full_reuse) fused = recover_positions(std::move(fused), cfg);
  trace.timings.recover_ms = ms_since(t);

  const std::int32_t m = fused.length();
  const auto nq = static_cast<std::int32_t>(request.question.size());
  const std::int32_t n = m + nq;
  trace.n = n;

  PatchedCache& cache = result.cache;
  cache.segments = fused.segments;
  cache.segments.spans.back().length = nq;
  cache.token_ids = std::move(fused.token_ids);
  cache.token_ids.insert(cache.token_ids.end(), request.question.begin(), request.question.end());
  cache.rope_recovered = fused.rope_recovered;
  cache.layers = std::move(fused.layers);
  cache.question_queries.resize(static_cast<std::size_t>(cfg.n_layers));

  std::vector<std::int32_t> question_offsets(static_cast<std::size_t>(nq));
  std::iota(question_offsets.begin(), question_offsets.end(), m);
  {
    // Reserve question slots; each layer fills them before they are read.
    const Matrix zeros(static_cast<std::size_t>(nq), static_cast<std::size_t>(cfg.d_model));
    for (auto& layer : cache.layers) {
      layer.rope_applied = true;
      append_rows(layer, zeros, zeros, question_offsets);
    }
  }

  RecomputeSet& re = result.recompute;
  re.strategy = plan.strategy;
  Matrix x;
  std::vector<std::int32_t> rows;  // Re ∪ Q, ascending

  if (full_reuse) {
    rows = question_offsets;
    x = embed(model, request.question);
    t = Clock::now();
    for (int l = 0; l < cfg.n_layers; ++l)
      x = step_rows(model, cache, l, rows, x, static_cast<std::size_t>(nq));
    trace.timings.recompute_ms = ms_since(t);
  } else {
    t = Clock::now();
    std::vector<std::int32_t> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), 0);
    const auto all_slots = as_slots(all);
    const auto question_slots = as_slots(question_offsets);

    // Layer 0: every row, keys/values for the cached rows come from the
    // recovered chunk cache (exact at this layer).
    const Matrix x0 = embed(model, cache.token_ids);
    {
      const LayerWeights& lw = model.layers[0];
      const Matrix xn = rms_norm(x0, lw.attn_norm);
      Matrix q = matmul(xn, lw.wq);
      const Matrix xq = tail_rows(xn, static_cast<std::size_t>(nq));
      Matrix kq = matmul(xq, lw.wk);
      const Matrix vq = matmul(xq, lw.wv);
      rotate_heads(q, all, cfg);
      rotate_heads(kq, question_offsets, cfg);
      write_rows(cache.layers[0], question_slots, kq, vq);
      x = finish_layer(lw, x0, attention(q, all, cache.layers[0]));
      cache.question_queries[0] = tail_rows(q, static_cast<std::size_t>(nq));
    }

    // Layer 1: true Q/K/V for every row.
    Matrix q1;
    LayerKV v_cat;
    if (cfg.n_layers > 1) {
      const LayerWeights& lw = model.layers[1];
      const Matrix xn = rms_norm(x, lw.attn_norm);
      q1 = matmul(xn, lw.wq);
      Matrix k1 = matmul(xn, lw.wk);
      const Matrix v1 = matmul(xn, lw.wv);
      rotate_heads(q1, all, cfg);
      rotate_heads(k1, all, cfg);
      if (plan.strategy == Strategy::kKvDiff) v_cat = cache.layers[1];
      write_rows(cache.layers[1], all_slots, k1, v1);
      cache.question_queries[1] = tail_rows(q1, static_cast<std::size_t>(nq));
    }
    trace.timings.full_layers_ms = ms_since(t);

    t = Clock::now();
    const std::size_t docs = cache.segments.document_token_count();
    switch (plan.strategy) {
      case Strategy::kAttentionAware: {
        const Matrix& qq = cfg.n_layers > 1 ? cache.question_queries[1] : cache.question_queries[0];
        const LayerKV& kk = cfg.n_layers > 1 ? cache.layers[1] : cache.layers[0];
        re = select_recompute(score_tokens(qq, question_offsets, kk, cache.segments), plan.r, n,
                              cache.segments);
        break;
      }
      case Strategy::kKvDiff:
        if (cfg.n_layers > 1) {
          re = select_kv_diff(v_cat, cache.layers[1], plan.r, n, cache.segments);
        } else {
          re.strategy = Strategy::kKvDiff;
          re.budget = recompute_budget(plan.r, n, docs);
        }
        break;
      case Strategy::kHeadTail:
        re = select_head_tail(cache.segments, plan.head_tail_k);
        break;
      default:
        re.strategy = Strategy::kNone;
        break;
    }
    trace.timings.select_ms = ms_since(t);
    trace.p_requested = plan.strategy == Strategy::kHeadTail
                            ? re.budget
                            : static_cast<std::size_t>(std::max<long long>(
                                  std::llround(plan.r * static_cast<double>(n)), 0));
    if (plan.strategy == Strategy::kNone) trace.p_requested = 0;
    trace.clamped = trace.p_requested > re.indices.size();

    rows = re.indices;
    rows.insert(rows.end(), question_offsets.begin(), question_offsets.end());

    t = Clock::now();
    if (cfg.n_layers > 1) {
      const LayerWeights& lw = model.layers[1];
      const Matrix qr = gather_rows(q1, as_slots(rows));
      x = finish_layer(lw, gather_rows(x, as_slots(rows)), attention(qr, rows, cache.layers[1]));
    } else {
      x = gather_rows(x, as_slots(rows));
    }
    for (int l = 2; l < cfg.n_layers; ++l)
      x = step_rows(model, cache, l, rows, x, static_cast<std::size_t>(nq));
    trace.timings.recompute_ms = ms_since(t);
  }

  cache.patched_offsets = rows;
  result.logits = output_logits(model, x.row(x.rows - 1));
  trace.p = re.indices.size();
  trace.selected = re.indices;
  trace.flops_vanilla = vanilla_flops(n, cfg);
  trace.flops_prefill = full_reuse ? full_reuse_flops(n, nq, cfg)
                                   : fused_flops(n, nq, re.indices.size(), cfg);
  trace.timings.total_ms = ms_since(t_start);
  return result;
}

FusionResult vanilla_prefill(const ModelWeights& model,
                             std::span<const std::vector<std::uint32_t>> chunks,
                             std::span<const std::uint32_t> question,
                             std::vector<Matrix>* all_queries) {
  validate_question(question);
  A3KV_CHECK(!chunks.empty(), ErrorKind::kInput, "vanilla_prefill: at least a system chunk is required");
  const auto t_start = Clock::now();
  FusionResult result;
  PatchedCache& cache = result.cache;
  std::int32_t offset = 0;
  for (std::size_t c = 0; c < chunks.size(); ++c) {
    Segment seg;
    seg.role = c == 0 ? SegmentRole::kSystem : SegmentRole::kDocument;
    seg.doc_index = c == 0 ? -1 : static_cast<int>(c - 1);
    seg.start = offset;
    seg.length = static_cast<std::int32_t>(chunks[c].size());
    cache.segments.spans.push_back(seg);
    cache.token_ids.insert(cache.token_ids.end(), chunks[c].begin(), chunks[c].end());
    offset += seg.length;
  }
  const auto nq = static_cast<std::int32_t>(question.size());
  cache.segments.spans.push_back(Segment{SegmentRole::kQuestion, -1, offset, nq});
  cache.token_ids.insert(cache.token_ids.end(), question.begin(), question.end());

  PrefillResult pre = full_prefill(model, cache.token_ids, true);
  cache.layers = std::move(pre.cache);
  cache.rope_recovered = true;
  for (auto& q : pre.queries) cache.question_queries.push_back(tail_rows(q, static_cast<std::size_t>(nq)));
  if (all_queries) *all_queries = std::move(pre.queries);
  const auto n = static_cast<std::int32_t>(cache.token_ids.size());
  cache.patched_offsets.resize(static_cast<std::size_t>(n));
  std::iota(cache.patched_offsets.begin(), cache.patched_offsets.end(), 0);
  result.logits = std::move(pre.logits);

  result.recompute.strategy = Strategy::kVanilla;
  FusionTrace& trace = result.trace;
  trace.strategy = Strategy::kVanilla;
  trace.r = 1.0;
  trace.n = n;
  trace.flops_vanilla = vanilla_flops(n, model.config);
  trace.flops_prefill = trace.flops_vanilla;
  trace.timings.full_layers_ms = ms_since(t_start);
  trace.timings.total_ms = trace.timings.full_layers_ms;
  return result;
}

std::string trace_to_json(const FusionTrace& trace, int indent) {
  nlohmann::ordered_json j;
  j["strategy"] = strategy_name(trace.strategy);
  j["r"] = trace.r;
  j["head_tail_k"] = trace.head_tail_k;
  j["n"] = trace.n;
  j["p_requested"] = trace.p_requested;
  j["p"] = trace.p;
  j["clamped"] = trace.clamped;
  j["selected"] = trace.selected;
  j["timings_ms"] = {
      {"load", trace.timings.load_ms},       {"concat", trace.timings.concat_ms},
      {"recover", trace.timings.recover_ms}, {"full_layers", trace.timings.full_layers_ms},
      {"select", trace.timings.select_ms},   {"recompute", trace.timings.recompute_ms},
      {"total", trace.timings.total_ms}};
  j["flops"] = {{"prefill", trace.flops_prefill}, {"vanilla", trace.flops_vanilla}};
  if (trace.eviction) {
    const EvictionSummary& e = *trace.eviction;
    j["eviction"] = {{"capacity", e.capacity},
                     {"kernel", e.kernel},
                     {"original_length", e.original_length},
                     {"retained", e.retained},
                     {"resident_floats", e.resident_floats},
                     {"resident_bytes", e.resident_bytes}};
  }
  return j.dump(indent);
}

}  // namespace a3kv
