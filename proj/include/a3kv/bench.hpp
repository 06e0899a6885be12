// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

// Benchmark harness: synthetic inputs, the full-prefill oracle, attention-map
// loss, selection hit rates, TTFT/TPOT timing and greedy-generation
// agreement, aggregated into CSV/JSON reports.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "a3kv/eviction.hpp"
#include "a3kv/fusion.hpp"
#include "a3kv/kv_cache.hpp"
#include "a3kv/model.hpp"

namespace a3kv {

struct InputRecipe {
  std::string kind = "uniform";  // "uniform" or "needle"
  int num_chunks = 4;
  int chunk_len = 64;
  int system_len = 16;
  int question_len = 16;
  int needle_len = 8;
  std::uint64_t seed = 1;
  int instances = 1;
};

struct Instance {
  std::vector<std::uint32_t> system;
  std::vector<std::vector<std::uint32_t>> documents;
  std::vector<std::uint32_t> question;

  // System chunk followed by the documents.
  std::vector<std::vector<std::uint32_t>> chunks() const;
  std::vector<std::uint32_t> all_tokens() const;
  std::int32_t length() const;
};

// Token ids drawn from mt19937_64 seeded with `seed`. The needle recipe
// plants a run of needle_len distinct tokens inside one document and ends
// the question with the first half of that run.
Instance make_instance(const InputRecipe& recipe, int vocab_size, std::uint64_t seed);

// Precomputes every chunk of the instance into the store; returns ids in
// system-then-documents order.
std::vector<Digest> precompute_instance(const ModelWeights& model, const Instance& instance,
                                        MemoryStore& store);
std::vector<Digest> precompute_instance(const ModelWeights& model, const Instance& instance,
                                        const DirectoryStore& store);

// Full prefill with every layer's queries for all rows kept, for attention
// map comparisons.
struct VanillaOracle {
  FusionResult prefill;
  std::vector<Matrix> queries;  // per layer, n × d_model, rotated
};

VanillaOracle make_oracle(const ModelWeights& model, const Instance& instance);

// Layer-1 top-p oracle for hit rates: the p document tokens the true
// question queries attend to most.
RecomputeSet oracle_topk(const VanillaOracle& oracle, std::size_t p);

enum class ProbeRows { kQuestion, kAll };

// Frobenius norm of the difference between the probe rows' attention weight
// maps over `patched` and over the oracle cache at `layer`, both computed
// with the oracle's queries.
double attention_l2_loss(const PatchedCache& patched, const VanillaOracle& oracle, int layer,
                         ProbeRows probe = ProbeRows::kQuestion);

struct GenerationRun {
  std::vector<std::uint32_t> tokens;
  std::vector<double> step_ms;  // one per decode step
  double evict_ms = 0;
  std::size_t peak_kv_floats = 0;
  std::optional<EvictionSummary> eviction;
};

// Greedy decoding from the prefill's first-token logits. With a policy, the
// cache is evicted once after the first token and decoding continues on the
// compacted cache.
GenerationRun generate_from(const ModelWeights& model, const FusionResult& prefill,
                            std::size_t length, const EvictionPolicy* eviction = nullptr);

// Prefill under `plan` (vanilla ignores the store) followed by greedy
// decoding of `length` tokens.
GenerationRun greedy_generate(const ModelWeights& model, const ChunkSource& store,
                              std::span<const Digest> chunk_ids, const Instance& instance,
                              const FusionPlan& plan, std::size_t length,
                              const EvictionPolicy* eviction = nullptr);

FusionResult run_prefill(const ModelWeights& model, const ChunkSource& store,
                         std::span<const Digest> chunk_ids, const Instance& instance,
                         const FusionPlan& plan);

struct TimingResult {
  double ttft_ms = 0;    // median prefill wall time, chunk loading included
  double tpot_ms = 0;    // median of per-run mean decode-step time
  double select_ms = 0;  // median recomputation-set selection time
};

TimingResult time_ttft_tpot(const ModelWeights& model, const ChunkSource& store,
                            std::span<const Digest> chunk_ids, const Instance& instance,
                            const FusionPlan& plan, std::size_t generation_length,
                            const EvictionPolicy* eviction, int warmup, int repetitions);

struct Assertion {
  std::string name;
  std::string lhs;  // "<strategy>[@r][+evict]:<metric>"
  std::string op;   // <, <=, >, >=, ==
  std::string rhs;  // selector or number
};

struct AssertionResult {
  std::string name;
  double lhs = 0;
  double rhs = 0;
  std::string op;
  bool passed = false;
};

struct BenchConfig {
  ModelConfig model;
  InputRecipe input;
  std::vector<Strategy> strategies = {Strategy::kVanilla,  Strategy::kFullReuse,
                                      Strategy::kNone,     Strategy::kKvDiff,
                                      Strategy::kHeadTail, Strategy::kAttentionAware};
  double r = 0.15;
  std::vector<double> r_grid = {0.05, 0.1, 0.15, 0.2, 0.3};
  int head_tail_k = -1;  // < 0: match the attention-aware budget
  EvictionPolicy eviction{1024, 7, false};
  std::size_t generation_length = 32;
  std::vector<std::size_t> generation_sweep = {10, 100, 300};
  std::vector<int> throughput_batches = {1, 2, 4, 8};
  int repetitions = 3;
  int warmup = 3;
  bool timing = true;
  bool parallel = false;  // agreement/loss metrics only
  ProbeRows probe = ProbeRows::kQuestion;
  std::string store_dir;  // empty: in-memory store
  bool auto_precompute = true;
  std::vector<Assertion> acceptance;

  void validate() const;
};

BenchConfig bench_config_from_json(std::string_view text);
BenchConfig default_bench_config();
// Single instance, one repetition, shortened sweeps.
BenchConfig quick_variant(BenchConfig config);

struct BenchRow {
  Strategy strategy = Strategy::kVanilla;
  double r = 0;
  bool evict = false;
  std::int32_t n = 0;
  int n_layers = 0;
  double ttft_ms = 0;
  double tpot_ms = 0;
  double flops_prefill = 0;
  std::vector<double> attn_l2_by_layer;
  double hit_rate = 0;  // NaN when the strategy selects nothing by design
  double first_token_agree = 0;
  double gen_agree_frac = 0;
  std::size_t peak_kv_floats = 0;
  std::size_t recompute_p = 0;
};

struct ThroughputRow {
  Strategy strategy = Strategy::kVanilla;
  bool evict = false;
  int batch = 1;
  double tokens_per_sec = 0;
};

struct RSweepRow {
  double r = 0;
  double gen_agree_frac = 0;
  double first_token_agree = 0;
  double attn_l2_mean = 0;
};

struct GenerationSweepRow {
  Strategy strategy = Strategy::kVanilla;
  bool evict = false;
  std::size_t generation_length = 0;
  double ttft_ms = 0;
  double tpot_ms = 0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::vector<ThroughputRow> throughput;
  std::vector<RSweepRow> r_sweep;
  std::vector<GenerationSweepRow> generation_sweep;
  std::vector<AssertionResult> assertions;

  bool all_passed() const;
};

BenchReport run_bench(const BenchConfig& config);

// Resolves one assertion operand against the report rows.
double select_metric(const BenchReport& report, std::string_view selector);
std::vector<AssertionResult> evaluate_assertions(const BenchReport& report,
                                                 const std::vector<Assertion>& assertions);

// Columns: strategy,r,evict,n,L,ttft_ms,tpot_ms,flops_prefill,
// attn_l2_by_layer,hit_rate,first_token_agree,gen_agree_frac,peak_kv_floats
std::string report_csv(const BenchReport& report);
std::string throughput_csv(const BenchReport& report);
std::string r_sweep_csv(const BenchReport& report);
std::string generation_sweep_csv(const BenchReport& report);
// Same field names as the CSV; sweeps and assertions in their own arrays.
std::string report_json(const BenchReport& report, bool include_timing = true);

}  // namespace a3kv
