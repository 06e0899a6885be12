// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite: one PASS/FAIL line per criterion, details indented below.
// Exit status is nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "a3kv/bench.hpp"
#include "a3kv/error.hpp"
#include "a3kv/eviction.hpp"
#include "a3kv/flops.hpp"
#include "a3kv/fusion.hpp"
#include "a3kv/kv_cache.hpp"

using namespace a3kv;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      notes.push_back("violated: " + what);
    }
  }
  void note(const std::string& s) { notes.push_back(s); }
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ModelConfig bench_model(int layers = 8, std::uint64_t seed = 7) {
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

double max_abs(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(double(a[i]) - b[i]));
  return m;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0 : s / static_cast<double>(v.size());
}

// 1
Outcome full_recompute_equivalence() {
  Outcome o;
  const ModelWeights model = init_model(bench_model());
  InputRecipe recipe;
  recipe.num_chunks = 3;
  recipe.chunk_len = 490;
  recipe.system_len = 16;
  recipe.question_len = 16;
  double worst = 0;
  int same_gen = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Instance inst = make_instance(recipe, 258, seed);
    MemoryStore store;
    const auto ids = precompute_instance(model, inst, store);
    const auto van = run_prefill(model, store, ids, inst, FusionPlan{Strategy::kVanilla});
    const auto aa =
        run_prefill(model, store, ids, inst, FusionPlan{Strategy::kAttentionAware, 1.0, 0});
    const double d = max_abs(aa.logits, van.logits);
    worst = std::max(worst, d);
    o.require(d <= 1e-4, fmt("seed %llu logits differ by %.3g", (unsigned long long)seed, d));
    const auto gv = generate_from(model, van, 32);
    const auto ga = generate_from(model, aa, 32);
    same_gen += gv.tokens == ga.tokens;
    o.require(gv.tokens == ga.tokens, fmt("seed %llu generations differ", (unsigned long long)seed));
  }
  o.note(fmt("n=%d, max |logit diff|=%.3g, identical 32-token generations %d/20",
             16 + 3 * 490 + 16, worst, same_gen));
  return o;
}

// 2
Outcome pie_identity() {
  Outcome o;
  const ModelWeights model = init_model(bench_model());
  InputRecipe recipe;
  recipe.num_chunks = 4;
  recipe.chunk_len = 64;
  int identical = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Instance inst = make_instance(recipe, 258, seed);
    MemoryStore store;
    const auto ids = precompute_instance(model, inst, store);
    const auto a =
        run_prefill(model, store, ids, inst, FusionPlan{Strategy::kAttentionAware, 0.0, 0});
    const auto b = run_prefill(model, store, ids, inst, FusionPlan{Strategy::kNone});
    const bool same = a.logits == b.logits && a.cache.layers == b.cache.layers &&
                      a.cache.patched_offsets == b.cache.patched_offsets;
    identical += same;
    o.require(same, fmt("seed %llu differs", (unsigned long long)seed));
  }
  o.note(fmt("bitwise identical caches and logits on %d/10 instances", identical));
  return o;
}

// 3
Outcome position_recovery_exactness() {
  Outcome o;
  const ModelWeights model = init_model(bench_model());
  InputRecipe recipe;
  recipe.num_chunks = 3;
  recipe.chunk_len = 64;
  recipe.system_len = 24;
  double worst_l0 = 0, worst_sys = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Instance inst = make_instance(recipe, 258, seed);
    MemoryStore store;
    const auto ids = precompute_instance(model, inst, store);
    std::vector<ChunkKV> chunks;
    for (const auto& id : ids) chunks.push_back(store.load(id));
    const FusedCache fused = recover_positions(concat_chunks(chunks), model.config);
    const auto oracle = full_prefill(model, inst.all_tokens());
    const auto patched =
        run_prefill(model, store, ids, inst, FusionPlan{Strategy::kAttentionAware, 0.15, 0});
    const std::size_t ctx = fused.layers[0].length();
    const std::size_t sys = inst.system.size() * 16;
    for (std::size_t h = 0; h < 4; ++h) {
      const auto& ok = oracle.cache[0].heads[h];
      worst_l0 = std::max({worst_l0,
                           max_abs(fused.layers[0].heads[h].keys, std::span(ok.keys).first(ctx * 16)),
                           max_abs(fused.layers[0].heads[h].values,
                                   std::span(ok.values).first(ctx * 16))});
      for (std::size_t l = 0; l < 8; ++l) {
        const auto& want = oracle.cache[l].heads[h];
        for (const LayerKV* got : {&fused.layers[l], &patched.cache.layers[l]}) {
          worst_sys = std::max({worst_sys,
                                max_abs(std::span(got->heads[h].keys).first(sys),
                                        std::span(want.keys).first(sys)),
                                max_abs(std::span(got->heads[h].values).first(sys),
                                        std::span(want.values).first(sys))});
        }
      }
    }
  }
  o.require(worst_l0 <= 1e-6, fmt("layer-0 gap %.3g", worst_l0));
  o.require(worst_sys <= 1e-6, fmt("system-span gap %.3g", worst_sys));
  o.note(fmt("20 seeds: max layer-0 K/V gap %.3g, max system-span gap (all layers) %.3g",
             worst_l0, worst_sys));
  return o;
}

// 4
Outcome rope_algebra() {
  Outcome o;
  std::mt19937_64 rng(2026);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::uniform_int_distribution<int> pos(0, 4095);
  double worst_norm = 0, worst_rel = 0;
  bool identity = true;
  for (int pair = 0; pair < 50; ++pair) {
    std::vector<float> q(16), k(16);
    for (auto& x : q) x = u(rng);
    for (auto& x : k) x = u(rng);
    auto q0 = q;
    rope_rotate_inplace(q0, 0, 10000.0);
    identity = identity && q0 == q;
    const int m = pos(rng), n = pos(rng);
    auto qm = q, kn = k, qd = q;
    rope_rotate_inplace(qm, m, 10000.0);
    rope_rotate_inplace(kn, n, 10000.0);
    rope_rotate_inplace(qd, m - n, 10000.0);
    double lhs = 0, rhs = 0, nq = 0, nqm = 0;
    for (int i = 0; i < 16; ++i) {
      lhs += double(qm[i]) * kn[i];
      rhs += double(qd[i]) * k[i];
      nq += double(q[i]) * q[i];
      nqm += double(qm[i]) * qm[i];
    }
    worst_norm = std::max(worst_norm, std::fabs(std::sqrt(nqm) - std::sqrt(nq)) / std::sqrt(nq));
    worst_rel = std::max(worst_rel, std::fabs(lhs - rhs));
  }
  o.require(identity, "rotation at m=0 changed a vector");
  o.require(worst_norm <= 1e-5, fmt("norm drift %.3g", worst_norm));
  o.require(worst_rel <= 1e-5, fmt("relative-position gap %.3g", worst_rel));
  o.note(fmt("50 pairs: max relative norm drift %.3g, max |<R_m q,R_n k> - <R_(m-n) q,k>| %.3g",
             worst_norm, worst_rel));
  return o;
}

// 5
Outcome selection_optimality() {
  Outcome o;
  ModelConfig cfg = bench_model(4);
  const ModelWeights model = init_model(cfg);
  InputRecipe recipe;
  recipe.num_chunks = 3;
  recipe.chunk_len = 4;
  recipe.system_len = 4;
  recipe.question_len = 4;
  int checked = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Instance inst = make_instance(recipe, 258, seed);
    const VanillaOracle oracle = make_oracle(model, inst);
    const auto& seg = oracle.prefill.cache.segments;
    const auto all = oracle_topk(oracle, seg.document_token_count());
    const auto& s = all.scores;
    const std::size_t m = s.size();
    for (std::size_t p = 0; p <= m; ++p) {
      const auto re = select_top(s, p, seg, Strategy::kAttentionAware);
      const auto offsets = seg.document_offsets();
      double chosen = 0;
      for (auto idx : re.indices)
        chosen += s[static_cast<std::size_t>(std::lower_bound(offsets.begin(), offsets.end(), idx) -
                                             offsets.begin())];
      double best = -1;
      for (unsigned mask = 0; mask < (1u << m); ++mask) {
        if (static_cast<std::size_t>(__builtin_popcount(mask)) != p) continue;
        double sum = 0;
        for (std::size_t i = 0; i < m; ++i)
          if (mask & (1u << i)) sum += s[i];
        best = std::max(best, sum);
      }
      o.require(chosen >= best - 1e-7, fmt("seed %llu p=%zu not optimal", (unsigned long long)seed, p));
      ++checked;
    }
  }
  // ties resolve toward lower offsets
  SegmentMap seg;
  seg.spans = {{SegmentRole::kSystem, -1, 0, 2},
               {SegmentRole::kDocument, 0, 2, 6},
               {SegmentRole::kQuestion, -1, 8, 1}};
  const std::vector<float> ties = {0.1f, 0.3f, 0.3f, 0.2f, 0.3f, 0.3f};
  const auto re = select_top(ties, 3, seg, Strategy::kAttentionAware);
  o.require(re.indices == std::vector<std::int32_t>({3, 4, 6}), "tie-break not toward lower offset");
  o.note(fmt("%d (instance, p) pairs with 12 document tokens enumerated exhaustively", checked));
  return o;
}

// 6
Outcome ordering_analog() {
  Outcome o;
  BenchConfig cfg = default_bench_config();
  cfg.input.kind = "uniform";
  cfg.input.num_chunks = 4;
  cfg.input.chunk_len = 64;
  cfg.input.instances = 30;
  cfg.r = 0.15;
  cfg.r_grid = {};
  cfg.timing = false;
  const BenchReport rep = run_bench(cfg);
  auto agree = [&](const char* s) { return select_metric(rep, std::string(s) + ":gen_agree_frac"); };
  auto loss = [&](const char* s) { return select_metric(rep, std::string(s) + ":attn_l2_mean"); };
  const double aa = agree("attention_aware"), ht = agree("head_tail"), pie = agree("none"),
               full = agree("full"), kv = agree("kv_diff");
  const double l_aa = loss("attention_aware"), l_pie = loss("none"), l_ht = loss("head_tail"),
               l_kv = loss("kv_diff");
  o.require(aa >= ht, fmt("agreement attention_aware %.4f < head_tail %.4f", aa, ht));
  o.require(aa >= pie, fmt("agreement attention_aware %.4f < PIE %.4f", aa, pie));
  o.require(pie >= full, fmt("agreement PIE %.4f < FullReuse %.4f", pie, full));
  o.require(l_aa <= l_pie, fmt("L2 attention_aware %.5f > PIE %.5f", l_aa, l_pie));
  o.note(fmt("30 seeds, n=%d, 32-token greedy agreement: attention_aware %.4f, head_tail %.4f, "
             "PIE %.4f, FullReuse %.4f, kv_diff %.4f (reported)",
             rep.rows.front().n, aa, ht, pie, full, kv));
  o.note(fmt("question-row attention L2 (mean over layers): attention_aware %.5f, PIE %.5f, "
             "head_tail %.5f, kv_diff %.5f (reported)",
             l_aa, l_pie, l_ht, l_kv));
  o.note(fmt("first-token agreement: attention_aware %.3f, PIE %.3f, FullReuse %.3f",
             select_metric(rep, "attention_aware:first_token_agree"),
             select_metric(rep, "none:first_token_agree"),
             select_metric(rep, "full:first_token_agree")));
  return o;
}

// 7
Outcome flop_model() {
  Outcome o;
  for (int layers : {4, 8, 16}) {
    const ModelConfig c = bench_model(layers);
    const int n = 4096, q = 32, m = n - q;
    double qrows = 0;
    for (int p = m; p < n; ++p) qrows += row_flops(c) + attention_flops(c, p);
    double layer = 0;
    for (int p = 0; p < n; ++p) layer += row_flops(c) + attention_flops(c, p);
    const double expect = 2.0 / layers + (layers - 2.0) / layers * qrows / layer;
    const double got = fused_flops(n, q, 0, c) / vanilla_flops(n, c);
    const double rel = std::fabs(got - expect) / expect;
    o.require(rel <= 0.01, fmt("L=%d ratio %.5f vs %.5f", layers, got, expect));
    o.note(fmt("L=%d: r=0 fused/vanilla %.5f, 2/L + question correction %.5f (rel err %.2g)",
               layers, got, expect, rel));
  }
  const ModelConfig c = bench_model(8);
  const double ratio =
      flops_estimate(FusionPlan{Strategy::kAttentionAware, 0.15, 0}, 4096, 64, c) /
      vanilla_flops(4096, c);
  o.require(ratio < 0.75, fmt("r=0.15 ratio %.4f", ratio));
  const double r1 = flops_estimate(FusionPlan{Strategy::kAttentionAware, 1.0, 0}, 4096, 64, c) /
                    vanilla_flops(4096, c);
  o.require(std::fabs(r1 - 1.0) < 1e-12, "r=1 differs from vanilla");
  o.note(fmt("L=8, n=4096, r=0.15: fused/vanilla %.4f; r=1: %.6f", ratio, r1));
  return o;
}

// 8
Outcome eviction_contract() {
  Outcome o;
  ModelConfig cfg = bench_model(4);
  const ModelWeights model = init_model(cfg);
  InputRecipe recipe;
  recipe.num_chunks = 5;
  recipe.chunk_len = 1180;
  recipe.system_len = 24;
  recipe.question_len = 100;
  const Instance inst = make_instance(recipe, 258, 11);
  MemoryStore store;
  const auto ids = precompute_instance(model, inst, store);
  const auto prefill =
      run_prefill(model, store, ids, inst, FusionPlan{Strategy::kAttentionAware, 0.15, 0});
  const std::int32_t n = prefill.cache.length();
  const EvictionPolicy policy{1024, 7, true};
  const CompactedCache c = evict(prefill.cache, policy);
  bool counts = true, protect = true;
  for (std::size_t l = 0; l < c.layers.size(); ++l) {
    for (std::size_t h = 0; h < c.layers[l].heads.size(); ++h) {
      counts = counts && c.layers[l].heads[h].size() == 1024;
      const auto& origin = c.origin[l][h];
      for (std::int32_t s = 0; s < 24; ++s)
        protect = protect && std::binary_search(origin.begin(), origin.end(), s);
      for (std::int32_t q = n - 100; q < n; ++q)
        protect = protect && std::binary_search(origin.begin(), origin.end(), q);
    }
  }
  const double fraction = 1024.0 / n;
  o.require(counts, "retained count != 1024 somewhere");
  o.require(protect, "a system/question offset was evicted");
  o.require(std::fabs(fraction - 0.17) < 0.005, fmt("retained fraction %.4f", fraction));
  o.require(c.resident_floats() == static_cast<std::size_t>(4 * 4 * 1024 * 16 * 2),
            "resident float accounting");
  o.note(fmt("n=%d, |S|=24, |Q|=100, C=1024: 1024 rows per layer/head, fraction %.4f", n,
             fraction));

  // C >= n reproduces the un-evicted decode
  CompactedCache same = evict(prefill.cache, EvictionPolicy{static_cast<std::size_t>(n), 7, true});
  KVCache plain = prefill.cache.layers;
  std::uint32_t tok = argmax(prefill.logits);
  double worst = 0;
  for (std::int32_t step = 0; step < 4; ++step) {
    const auto a = decode_with_eviction(model, same, tok, n + step);
    const auto b = decode_step(model, plain, tok, n + step);
    worst = std::max(worst, max_abs(a, b));
    tok = argmax(b);
  }
  o.require(worst <= 1e-6, fmt("C>=n decode gap %.3g", worst));
  o.note(fmt("C=n decode vs un-evicted: max |logit diff| %.3g over 4 steps", worst));

  // median TPOT with and without eviction
  std::vector<double> with, without;
  const int runs = 7;
  for (int i = 0; i < runs + 1; ++i) {
    const auto a = generate_from(model, prefill, 16, &policy);
    const auto b = generate_from(model, prefill, 16);
    if (i == 0) continue;  // warm-up
    with.push_back(mean(a.step_ms));
    without.push_back(mean(b.step_ms));
  }
  const double tw = median(with), tn = median(without);
  o.require(tw <= tn, fmt("TPOT with eviction %.3f ms > without %.3f ms", tw, tn));
  o.note(fmt("median TPOT over %d runs: %.3f ms evicted vs %.3f ms full cache", runs, tw, tn));
  return o;
}

// 9
Outcome persistence() {
  Outcome o;
  std::mt19937_64 rng(99);
  auto uni = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  std::uniform_real_distribution<float> val(-4.0f, 4.0f);
  int lossless = 0, detected = 0;
  const int trials = 1000;
  for (int t = 0; t < trials; ++t) {
    ModelConfig cfg;
    cfg.n_layers = uni(1, 4);
    cfg.n_heads = uni(1, 4);
    cfg.head_dim = 2 * uni(1, 8);
    cfg.d_model = cfg.n_heads * cfg.head_dim;
    cfg.seed = rng();
    ChunkKV c;
    c.fingerprint = model_fingerprint(cfg);
    const int len = uni(1, 40);
    for (int i = 0; i < len; ++i) c.token_ids.push_back(static_cast<std::uint32_t>(rng() % 50000));
    c.id = chunk_id(c.token_ids, c.fingerprint);
    const bool rotated = uni(0, 1) == 1;
    for (int l = 0; l < cfg.n_layers; ++l) {
      LayerKV layer = LayerKV::empty(cfg.n_heads, cfg.head_dim, rotated);
      for (auto& h : layer.heads) {
        for (int i = 0; i < len * cfg.head_dim; ++i) {
          h.keys.push_back(val(rng));
          h.values.push_back(val(rng));
        }
        for (int i = 0; i < len; ++i) h.positions.push_back(i);
      }
      c.layers.push_back(std::move(layer));
    }
    const auto bytes = encode_chunk(c);
    const ChunkKV back = decode_chunk(bytes);
    lossless += back == c && encode_chunk(back) == bytes;

    auto bad = bytes;
    const std::size_t at = static_cast<std::size_t>(rng() % bad.size());
    bad[at] ^= static_cast<std::uint8_t>(1u << uni(0, 7));
    try {
      (void)decode_chunk(bad);
    } catch (const Error& e) {
      detected += e.kind() == ErrorKind::kIntegrity;
    }
  }
  o.require(lossless == trials, fmt("%d/%d lossless", lossless, trials));
  o.require(detected == trials, fmt("%d/%d corruptions detected", detected, trials));
  o.note(fmt("%d/%d random chunks round-trip bitwise, %d/%d single-bit corruptions detected",
             lossless, trials, detected, trials));
  return o;
}

// 10
Outcome hit_rate_contract() {
  Outcome o;
  const ModelWeights model = init_model(bench_model());
  InputRecipe recipe;
  recipe.num_chunks = 4;
  recipe.chunk_len = 64;
  std::vector<double> aa, kv, ht;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Instance inst = make_instance(recipe, 258, seed);
    MemoryStore store;
    const auto ids = precompute_instance(model, inst, store);
    const VanillaOracle oracle = make_oracle(model, inst);
    const auto a =
        run_prefill(model, store, ids, inst, FusionPlan{Strategy::kAttentionAware, 0.15, 0});
    const auto k = run_prefill(model, store, ids, inst, FusionPlan{Strategy::kKvDiff, 0.15, 0});
    const std::size_t p = a.recompute.indices.size();
    const int width = static_cast<int>(std::lround(static_cast<double>(p) / 8.0));
    const auto h = run_prefill(model, store, ids, inst, FusionPlan{Strategy::kHeadTail, 0.15, width});
    aa.push_back(hit_rate(a.recompute, oracle_topk(oracle, p)));
    kv.push_back(hit_rate(k.recompute, oracle_topk(oracle, k.recompute.indices.size())));
    ht.push_back(hit_rate(h.recompute, oracle_topk(oracle, h.recompute.indices.size())));
    o.require(aa.back() == 1.0, fmt("seed %llu hit rate %.3f", (unsigned long long)seed, aa.back()));
  }
  o.note(fmt("mean hit rate vs layer-1 oracle over 10 seeds: attention_aware %.3f, kv_diff %.3f, "
             "head_tail %.3f",
             mean(aa), mean(kv), mean(ht)));
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"full-recompute equivalence", full_recompute_equivalence},
      {"PIE identity", pie_identity},
      {"position-recovery exactness", position_recovery_exactness},
      {"RoPE algebra", rope_algebra},
      {"selection optimality", selection_optimality},
      {"ordering analog", ordering_analog},
      {"FLOP model", flop_model},
      {"eviction contract", eviction_contract},
      {"persistence", persistence},
      {"hit-rate contract", hit_rate_contract},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    const auto t0 = Clock::now();
    Outcome out;
    try {
      out = run();
    } catch (const std::exception& e) {
      out.pass = false;
      out.note(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    std::printf("%s  %s  (%.1fs)\n", out.pass ? "PASS" : "FAIL", name, secs);
    for (const auto& n : out.notes) std::printf("      %s\n", n.c_str());
    std::fflush(stdout);
    failed += !out.pass;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed,
              criteria.size());
  return failed == 0 ? 0 : 1;
}
