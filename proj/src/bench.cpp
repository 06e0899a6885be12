// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

#include "a3kv/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <future>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "a3kv/error.hpp"
#include "a3kv/flops.hpp"
#include "json_util.hpp"

namespace a3kv {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

double median(std::vector<double> xs) {
  if (xs.empty()) return 0.0;
  std::sort(xs.begin(), xs.end());
  const std::size_t mid = xs.size() / 2;
  return xs.size() % 2 ? xs[mid] : 0.5 * (xs[mid - 1] + xs[mid]);
}

double mean(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

std::vector<std::int32_t> question_positions(const PatchedCache& cache) {
  std::vector<std::int32_t> pos(static_cast<std::size_t>(cache.segments.question_length()));
  std::iota(pos.begin(), pos.end(), cache.segments.question_start());
  return pos;
}

bool uses_selection(Strategy s) {
  return s == Strategy::kKvDiff || s == Strategy::kHeadTail || s == Strategy::kAttentionAware;
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

std::vector<std::vector<std::uint32_t>> Instance::chunks() const {
  std::vector<std::vector<std::uint32_t>> out;
  out.push_back(system);
  out.insert(out.end(), documents.begin(), documents.end());
  return out;
}

std::vector<std::uint32_t> Instance::all_tokens() const {
  std::vector<std::uint32_t> out = system;
  for (const auto& d : documents) out.insert(out.end(), d.begin(), d.end());
  out.insert(out.end(), question.begin(), question.end());
  return out;
}

std::int32_t Instance::length() const { return static_cast<std::int32_t>(all_tokens().size()); }

Instance make_instance(const InputRecipe& recipe, int vocab_size, std::uint64_t seed) {
  A3KV_CHECK(recipe.system_len >= 1 && recipe.chunk_len >= 1 && recipe.question_len >= 1 &&
                 recipe.num_chunks >= 0,
             ErrorKind::kConfig, "input recipe: lengths must be >= 1");
  A3KV_CHECK(vocab_size >= 1, ErrorKind::kConfig, "input recipe: empty vocabulary");
  std::mt19937_64 rng(seed);
  const auto vocab = static_cast<std::uint64_t>(vocab_size);
  auto draw = [&](int count) {
    std::vector<std::uint32_t> v(static_cast<std::size_t>(count));
    for (auto& t : v) t = static_cast<std::uint32_t>(rng() % vocab);
    return v;
  };
  Instance inst;
  inst.system = draw(recipe.system_len);
  for (int c = 0; c < recipe.num_chunks; ++c) inst.documents.push_back(draw(recipe.chunk_len));
  inst.question = draw(recipe.question_len);

  if (recipe.kind == "needle") {
    A3KV_CHECK(recipe.num_chunks >= 1 && recipe.needle_len >= 2 &&
                   recipe.needle_len <= recipe.chunk_len &&
                   recipe.needle_len / 2 <= recipe.question_len &&
                   recipe.needle_len <= vocab_size,
               ErrorKind::kConfig, "input recipe: needle does not fit the chunk/question sizes");
    // Distinct tokens so the run cannot be confused with its surroundings.
    std::vector<std::uint32_t> pool(static_cast<std::size_t>(vocab_size));
    std::iota(pool.begin(), pool.end(), 0u);
    for (std::size_t i = 0; i < static_cast<std::size_t>(recipe.needle_len); ++i)
      std::swap(pool[i], pool[i + rng() % (pool.size() - i)]);
    const std::size_t doc = rng() % static_cast<std::uint64_t>(recipe.num_chunks);
    const std::size_t at =
        rng() % static_cast<std::uint64_t>(recipe.chunk_len - recipe.needle_len + 1);
    for (int i = 0; i < recipe.needle_len; ++i)
      inst.documents[doc][at + static_cast<std::size_t>(i)] = pool[static_cast<std::size_t>(i)];
    const int cue = recipe.needle_len / 2;
    for (int i = 0; i < cue; ++i)
      inst.question[static_cast<std::size_t>(recipe.question_len - cue + i)] =
          pool[static_cast<std::size_t>(i)];
  } else {
    A3KV_CHECK(recipe.kind == "uniform", ErrorKind::kConfig,
               "input recipe: unknown kind '" + recipe.kind + "'");
  }
  return inst;
}

std::vector<Digest> precompute_instance(const ModelWeights& model, const Instance& instance,
                                        MemoryStore& store) {
  std::vector<Digest> ids;
  for (const auto& chunk : instance.chunks()) {
    ChunkKV kv = precompute_chunk(chunk, model);
    ids.push_back(kv.id);
    store.put(std::move(kv));
  }
  return ids;
}

std::vector<Digest> precompute_instance(const ModelWeights& model, const Instance& instance,
                                        const DirectoryStore& store) {
  std::vector<Digest> ids;
  const Digest fp = model_fingerprint(model.config);
  for (const auto& chunk : instance.chunks()) {
    const Digest id = chunk_id(chunk, fp);
    if (!store.contains(id)) store.store(precompute_chunk(chunk, model));
    ids.push_back(id);
  }
  return ids;
}

VanillaOracle make_oracle(const ModelWeights& model, const Instance& instance) {
  VanillaOracle oracle;
  const auto chunks = instance.chunks();
  oracle.prefill = vanilla_prefill(model, chunks, instance.question, &oracle.queries);
  return oracle;
}

RecomputeSet oracle_topk(const VanillaOracle& oracle, std::size_t p) {
  const PatchedCache& cache = oracle.prefill.cache;
  const std::size_t layer = cache.layers.size() > 1 ? 1 : 0;
  const auto scores = score_tokens(cache.question_queries[layer], question_positions(cache),
                                   cache.layers[layer], cache.segments);
  return select_top(scores, p, cache.segments, Strategy::kAttentionAware);
}

double attention_l2_loss(const PatchedCache& patched, const VanillaOracle& oracle, int layer,
                         ProbeRows probe) {
  const PatchedCache& truth = oracle.prefill.cache;
  A3KV_CHECK(layer >= 0 && static_cast<std::size_t>(layer) < truth.layers.size(),
             ErrorKind::kInput, "attention_l2_loss: layer out of range");
  A3KV_CHECK(patched.token_ids == truth.token_ids, ErrorKind::kContract,
             "attention_l2_loss: caches cover different token sequences");
  const auto l = static_cast<std::size_t>(layer);
  const LayerKV& a = patched.layers[l];
  const LayerKV& b = truth.layers[l];
  const Matrix& queries = oracle.queries[l];
  const auto hd = static_cast<std::size_t>(b.head_dim);
  const std::int32_t first =
      probe == ProbeRows::kQuestion ? truth.segments.question_start() : 0;

  double ss = 0.0;
  for (std::int32_t row = first; row < truth.length(); ++row) {
    for (std::size_t h = 0; h < b.heads.size(); ++h) {
      const auto q = queries.row(static_cast<std::size_t>(row)).subspan(h * hd, hd);
      const auto wa = attention_weights(q, row, a.heads[h]);
      const auto wb = attention_weights(q, row, b.heads[h]);
      A3KV_CHECK(wa.size() == wb.size(), ErrorKind::kShape,
                 "attention_l2_loss: caches differ in length");
      for (std::size_t i = 0; i < wa.size(); ++i) {
        const double d = static_cast<double>(wa[i]) - wb[i];
        ss += d * d;
      }
    }
  }
  return std::sqrt(ss);
}

GenerationRun generate_from(const ModelWeights& model, const FusionResult& prefill,
                            std::size_t length, const EvictionPolicy* eviction) {
  A3KV_CHECK(length >= 1, ErrorKind::kInput, "generation length must be >= 1");
  GenerationRun run;
  run.tokens.push_back(argmax(prefill.logits));
  std::int32_t position = prefill.cache.length();

  if (eviction && eviction->enabled) {
    const auto t0 = Clock::now();
    CompactedCache compacted = evict(prefill.cache, *eviction);
    run.evict_ms = ms_since(t0);
    run.eviction = summarize_eviction(compacted, *eviction);
    for (std::size_t i = 1; i < length; ++i) {
      const auto t = Clock::now();
      const auto logits = decode_with_eviction(model, compacted, run.tokens.back(), position++);
      run.step_ms.push_back(ms_since(t));
      run.tokens.push_back(argmax(logits));
    }
    run.peak_kv_floats = compacted.resident_floats();
    return run;
  }

  KVCache cache = prefill.cache.layers;
  for (std::size_t i = 1; i < length; ++i) {
    const auto t = Clock::now();
    const auto logits = decode_step(model, cache, run.tokens.back(), position++);
    run.step_ms.push_back(ms_since(t));
    run.tokens.push_back(argmax(logits));
  }
  run.peak_kv_floats = resident_floats(cache);
  return run;
}

FusionResult run_prefill(const ModelWeights& model, const ChunkSource& store,
                         std::span<const Digest> chunk_ids, const Instance& instance,
                         const FusionPlan& plan) {
  if (plan.strategy == Strategy::kVanilla) {
    const auto chunks = instance.chunks();
    return vanilla_prefill(model, chunks, instance.question);
  }
  FusionRequest request;
  request.chunk_ids.assign(chunk_ids.begin(), chunk_ids.end());
  request.question = instance.question;
  return fused_prefill(model, store, request, plan);
}

GenerationRun greedy_generate(const ModelWeights& model, const ChunkSource& store,
                              std::span<const Digest> chunk_ids, const Instance& instance,
                              const FusionPlan& plan, std::size_t length,
                              const EvictionPolicy* eviction) {
  return generate_from(model, run_prefill(model, store, chunk_ids, instance, plan), length,
                       eviction);
}

TimingResult time_ttft_tpot(const ModelWeights& model, const ChunkSource& store,
                            std::span<const Digest> chunk_ids, const Instance& instance,
                            const FusionPlan& plan, std::size_t generation_length,
                            const EvictionPolicy* eviction, int warmup, int repetitions) {
  A3KV_CHECK(repetitions >= 1 && warmup >= 0, ErrorKind::kConfig,
             "timing: repetitions must be >= 1 and warmup >= 0");
  std::vector<double> ttft, tpot, select;
  for (int i = 0; i < warmup + repetitions; ++i) {
    const auto t0 = Clock::now();
    FusionResult prefill = run_prefill(model, store, chunk_ids, instance, plan);
    const double prefill_ms = ms_since(t0);
    GenerationRun gen = generate_from(model, prefill, generation_length, eviction);
    if (i < warmup) continue;
    ttft.push_back(prefill_ms + gen.evict_ms);
    tpot.push_back(mean(gen.step_ms));
    select.push_back(prefill.trace.timings.select_ms);
  }
  return TimingResult{median(ttft), median(tpot), median(select)};
}

void BenchConfig::validate() const {
  model.validate();
  A3KV_CHECK(input.instances >= 1, ErrorKind::kConfig, "bench: instances must be >= 1");
  A3KV_CHECK(repetitions >= 1 && warmup >= 0, ErrorKind::kConfig,
             "bench: repetitions must be >= 1 and warmup >= 0");
  A3KV_CHECK(generation_length >= 1, ErrorKind::kConfig, "bench: generation_length must be >= 1");
  A3KV_CHECK(!strategies.empty(), ErrorKind::kConfig, "bench: no strategies");
  A3KV_CHECK(r >= 0.0 && r <= 1.0, ErrorKind::kConfig, "bench: r must lie in [0, 1]");
  for (double x : r_grid)
    A3KV_CHECK(x >= 0.0 && x <= 1.0, ErrorKind::kConfig, "bench: r_grid values must lie in [0, 1]");
  for (int b : throughput_batches)
    A3KV_CHECK(b >= 1, ErrorKind::kConfig, "bench: batch counts must be >= 1");
  for (std::size_t g : generation_sweep)
    A3KV_CHECK(g >= 1, ErrorKind::kConfig, "bench: generation lengths must be >= 1");
  if (eviction.enabled) eviction.validate();
  make_instance(input, model.vocab_size, input.seed);
}

BenchConfig default_bench_config() {
  BenchConfig c;
  c.model.n_layers = 8;
  c.model.n_heads = 4;
  c.model.head_dim = 16;
  c.model.d_model = 64;
  c.model.d_ff = 256;
  c.model.vocab_size = 258;
  c.model.seed = 7;
  c.input.instances = 8;
  return c;
}

BenchConfig quick_variant(BenchConfig c) {
  c.input.instances = 1;
  c.repetitions = 1;
  c.warmup = 1;
  c.r_grid = {c.r};
  c.generation_sweep = {10};
  c.throughput_batches = {1, 2};
  c.generation_length = std::min<std::size_t>(c.generation_length, 16);
  return c;
}

BenchConfig bench_config_from_json(std::string_view text) {
  const auto j = detail::parse_json(text, "bench config");
  A3KV_CHECK(j.is_object(), ErrorKind::kConfig, "bench config: expected a JSON object");
  static const std::set<std::string> kKeys = {
      "model", "input", "strategies", "r", "r_grid", "head_tail_k", "eviction",
      "generation_length", "generation_sweep", "throughput_batches", "repetitions", "warmup",
      "timing", "parallel", "probe", "store_dir", "auto_precompute", "acceptance"};
  for (const auto& [key, _] : j.items())
    A3KV_CHECK(kKeys.count(key) != 0, ErrorKind::kConfig,
               "bench config: unknown field '" + key + "'");

  BenchConfig c = default_bench_config();
  try {
    if (j.contains("model")) c.model = config_from_json(j.at("model").dump());
    if (j.contains("input")) {
      const auto& in = j.at("input");
      static const std::set<std::string> kInputKeys = {
          "kind", "num_chunks", "chunk_len", "system_len", "question_len", "needle_len",
          "seed", "instances"};
      for (const auto& [key, _] : in.items())
        A3KV_CHECK(kInputKeys.count(key) != 0, ErrorKind::kConfig,
                   "bench config: unknown input field '" + key + "'");
      c.input.kind = in.value("kind", c.input.kind);
      c.input.num_chunks = in.value("num_chunks", c.input.num_chunks);
      c.input.chunk_len = in.value("chunk_len", c.input.chunk_len);
      c.input.system_len = in.value("system_len", c.input.system_len);
      c.input.question_len = in.value("question_len", c.input.question_len);
      c.input.needle_len = in.value("needle_len", c.input.needle_len);
      c.input.seed = in.value("seed", c.input.seed);
      c.input.instances = in.value("instances", c.input.instances);
    }
    if (j.contains("strategies")) {
      c.strategies.clear();
      for (const auto& s : j.at("strategies")) c.strategies.push_back(parse_strategy(s.get<std::string>()));
    }
    c.r = j.value("r", c.r);
    if (j.contains("r_grid")) c.r_grid = j.at("r_grid").get<std::vector<double>>();
    c.head_tail_k = j.value("head_tail_k", c.head_tail_k);
    if (j.contains("eviction")) {
      const auto& e = j.at("eviction");
      for (const auto& [key, _] : e.items())
        A3KV_CHECK(key == "enabled" || key == "capacity" || key == "kernel", ErrorKind::kConfig,
                   "bench config: unknown eviction field '" + key + "'");
      c.eviction.enabled = e.value("enabled", c.eviction.enabled);
      c.eviction.capacity = e.value("capacity", c.eviction.capacity);
      c.eviction.kernel = e.value("kernel", c.eviction.kernel);
    }
    c.generation_length = j.value("generation_length", c.generation_length);
    if (j.contains("generation_sweep"))
      c.generation_sweep = j.at("generation_sweep").get<std::vector<std::size_t>>();
    if (j.contains("throughput_batches"))
      c.throughput_batches = j.at("throughput_batches").get<std::vector<int>>();
    c.repetitions = j.value("repetitions", c.repetitions);
    c.warmup = j.value("warmup", c.warmup);
    c.timing = j.value("timing", c.timing);
    c.parallel = j.value("parallel", c.parallel);
    if (j.contains("probe")) {
      const auto p = j.at("probe").get<std::string>();
      A3KV_CHECK(p == "question" || p == "all", ErrorKind::kConfig,
                 "bench config: probe must be 'question' or 'all'");
      c.probe = p == "all" ? ProbeRows::kAll : ProbeRows::kQuestion;
    }
    c.store_dir = j.value("store_dir", c.store_dir);
    c.auto_precompute = j.value("auto_precompute", c.auto_precompute);
    if (j.contains("acceptance")) {
      for (const auto& a : j.at("acceptance")) {
        Assertion as;
        as.name = a.at("name").get<std::string>();
        as.lhs = a.at("lhs").get<std::string>();
        as.op = a.at("op").get<std::string>();
        const auto& rhs = a.at("rhs");
        as.rhs = rhs.is_number() ? fmt(rhs.get<double>()) : rhs.get<std::string>();
        c.acceptance.push_back(std::move(as));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("bench config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

struct Combo {
  Strategy strategy;
  bool evict;
};

// Everything measured for one (strategy, eviction) combination on one
// instance; timing is handled separately.
struct ComboMetrics {
  std::vector<double> attn_l2;
  double hit = std::numeric_limits<double>::quiet_NaN();
  double first_agree = 0;
  double gen_agree = 0;
  std::size_t peak = 0;
  std::size_t p = 0;
  double flops = 0;
};

struct InstanceMetrics {
  std::int32_t n = 0;
  std::vector<ComboMetrics> combos;
  std::vector<ComboMetrics> sweep;  // attention_aware over r_grid
};

double agreement(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
  const std::size_t len = std::min(a.size(), b.size());
  if (len == 0) return 1.0;
  std::size_t same = 0;
  for (std::size_t i = 0; i < len; ++i) same += a[i] == b[i];
  return static_cast<double>(same) / static_cast<double>(len);
}

ComboMetrics measure(const ModelWeights& model, const FusionResult& prefill,
                     const VanillaOracle& oracle, std::span<const std::uint32_t> vanilla_tokens,
                     const BenchConfig& cfg, bool evict) {
  ComboMetrics m;
  for (int l = 0; l < model.config.n_layers; ++l)
    m.attn_l2.push_back(attention_l2_loss(prefill.cache, oracle, l, cfg.probe));
  if (uses_selection(prefill.trace.strategy)) {
    m.hit = hit_rate(prefill.recompute, oracle_topk(oracle, prefill.recompute.indices.size()));
  } else if (prefill.trace.strategy == Strategy::kNone) {
    m.hit = 1.0;
  }
  m.p = prefill.recompute.indices.size();
  m.flops = prefill.trace.flops_prefill;
  const GenerationRun gen =
      generate_from(model, prefill, cfg.generation_length, evict ? &cfg.eviction : nullptr);
  m.first_agree = gen.tokens.front() == vanilla_tokens.front() ? 1.0 : 0.0;
  m.gen_agree = agreement(gen.tokens, vanilla_tokens);
  m.peak = gen.peak_kv_floats;
  return m;
}

int matched_head_tail_k(const BenchConfig& cfg, const Instance& inst) {
  if (cfg.head_tail_k >= 0) return cfg.head_tail_k;
  const std::size_t docs = static_cast<std::size_t>(cfg.input.num_chunks) *
                           static_cast<std::size_t>(cfg.input.chunk_len);
  const std::size_t p = recompute_budget(cfg.r, inst.length(), docs);
  const int chunks = std::max(cfg.input.num_chunks, 1);
  return std::max(1, static_cast<int>(std::lround(static_cast<double>(p) / (2.0 * chunks))));
}

std::vector<Digest> resolve_ids(const ModelWeights& model, const Instance& inst,
                                const BenchConfig& cfg, const ChunkSource& store,
                                MemoryStore* memory, const DirectoryStore* dir) {
  if (cfg.auto_precompute) {
    if (memory) return precompute_instance(model, inst, *memory);
    return precompute_instance(model, inst, *dir);
  }
  std::vector<Digest> ids;
  const Digest fp = model_fingerprint(model.config);
  for (const auto& chunk : inst.chunks()) ids.push_back(chunk_id(chunk, fp));
  for (const auto& id : ids) (void)store.load(id);  // surfaces kNotFound early
  return ids;
}

InstanceMetrics evaluate_instance(const ModelWeights& model, const BenchConfig& cfg,
                                  const std::vector<Combo>& combos, int index,
                                  const DirectoryStore* shared_dir) {
  const Instance inst = make_instance(cfg.input, model.config.vocab_size,
                                      cfg.input.seed + static_cast<std::uint64_t>(index));
  MemoryStore memory;
  const ChunkSource& store = shared_dir ? static_cast<const ChunkSource&>(*shared_dir)
                                        : static_cast<const ChunkSource&>(memory);
  const auto ids = resolve_ids(model, inst, cfg, store, shared_dir ? nullptr : &memory, shared_dir);

  const VanillaOracle oracle = make_oracle(model, inst);
  const auto vanilla_tokens = generate_from(model, oracle.prefill, cfg.generation_length).tokens;
  const int k = matched_head_tail_k(cfg, inst);

  InstanceMetrics out;
  out.n = inst.length();
  std::optional<FusionResult> cached;
  Strategy cached_for = Strategy::kVanilla;
  for (const Combo& combo : combos) {
    if (!cached || cached_for != combo.strategy) {
      cached = run_prefill(model, store, ids, inst, FusionPlan{combo.strategy, cfg.r, k});
      cached_for = combo.strategy;
    }
    out.combos.push_back(measure(model, *cached, oracle, vanilla_tokens, cfg, combo.evict));
  }
  for (double r : cfg.r_grid) {
    const FusionResult pre =
        run_prefill(model, store, ids, inst, FusionPlan{Strategy::kAttentionAware, r, k});
    out.sweep.push_back(measure(model, pre, oracle, vanilla_tokens, cfg, false));
  }
  return out;
}

}  // namespace

BenchReport run_bench(const BenchConfig& cfg) {
  cfg.validate();
  const ModelWeights model = init_model(cfg.model);
  std::optional<DirectoryStore> dir;
  if (!cfg.store_dir.empty()) dir.emplace(cfg.store_dir);

  std::vector<Combo> combos;
  for (Strategy s : cfg.strategies) {
    combos.push_back({s, false});
    if (cfg.eviction.enabled) combos.push_back({s, true});
  }

  std::vector<InstanceMetrics> per_instance;
  const DirectoryStore* shared = dir ? &*dir : nullptr;
  if (cfg.parallel) {
    std::vector<std::future<InstanceMetrics>> futures;
    for (int i = 0; i < cfg.input.instances; ++i)
      futures.push_back(std::async(std::launch::async, evaluate_instance, std::cref(model),
                                   std::cref(cfg), std::cref(combos), i, shared));
    for (auto& f : futures) per_instance.push_back(f.get());
  } else {
    for (int i = 0; i < cfg.input.instances; ++i)
      per_instance.push_back(evaluate_instance(model, cfg, combos, i, shared));
  }

  const auto count = static_cast<double>(per_instance.size());
  auto aggregate = [&](auto pick, std::size_t idx, bool sweep) {
    double total = 0;
    for (const auto& im : per_instance) total += pick(sweep ? im.sweep[idx] : im.combos[idx]);
    return total / count;
  };

  BenchReport report;
  for (std::size_t c = 0; c < combos.size(); ++c) {
    BenchRow row;
    row.strategy = combos[c].strategy;
    row.r = cfg.r;
    row.evict = combos[c].evict;
    row.n = per_instance.front().n;
    row.n_layers = cfg.model.n_layers;
    row.flops_prefill = aggregate([](const ComboMetrics& m) { return m.flops; }, c, false);
    for (int l = 0; l < cfg.model.n_layers; ++l) {
      row.attn_l2_by_layer.push_back(aggregate(
          [l](const ComboMetrics& m) { return m.attn_l2[static_cast<std::size_t>(l)]; }, c, false));
    }
    row.hit_rate = aggregate([](const ComboMetrics& m) { return m.hit; }, c, false);
    row.first_token_agree = aggregate([](const ComboMetrics& m) { return m.first_agree; }, c, false);
    row.gen_agree_frac = aggregate([](const ComboMetrics& m) { return m.gen_agree; }, c, false);
    for (const auto& im : per_instance) {
      row.peak_kv_floats = std::max(row.peak_kv_floats, im.combos[c].peak);
      row.recompute_p = std::max(row.recompute_p, im.combos[c].p);
    }
    report.rows.push_back(std::move(row));
  }
  for (std::size_t i = 0; i < cfg.r_grid.size(); ++i) {
    RSweepRow row;
    row.r = cfg.r_grid[i];
    row.gen_agree_frac = aggregate([](const ComboMetrics& m) { return m.gen_agree; }, i, true);
    row.first_token_agree = aggregate([](const ComboMetrics& m) { return m.first_agree; }, i, true);
    row.attn_l2_mean = aggregate(
        [](const ComboMetrics& m) { return mean(m.attn_l2); }, i, true);
    report.r_sweep.push_back(row);
  }

  if (cfg.timing) {
    const Instance inst = make_instance(cfg.input, cfg.model.vocab_size, cfg.input.seed);
    MemoryStore memory;
    const ChunkSource& store = dir ? static_cast<const ChunkSource&>(*dir)
                                   : static_cast<const ChunkSource&>(memory);
    const auto ids = resolve_ids(model, inst, cfg, store, dir ? nullptr : &memory, shared);
    const int k = matched_head_tail_k(cfg, inst);
    for (std::size_t c = 0; c < combos.size(); ++c) {
      const FusionPlan plan{combos[c].strategy, cfg.r, k};
      const EvictionPolicy* ev = combos[c].evict ? &cfg.eviction : nullptr;
      const TimingResult t = time_ttft_tpot(model, store, ids, inst, plan, cfg.generation_length,
                                            ev, cfg.warmup, cfg.repetitions);
      report.rows[c].ttft_ms = t.ttft_ms;
      report.rows[c].tpot_ms = t.tpot_ms;
      for (std::size_t g : cfg.generation_sweep) {
        const TimingResult tg =
            time_ttft_tpot(model, store, ids, inst, plan, g, ev, cfg.warmup, cfg.repetitions);
        report.generation_sweep.push_back({combos[c].strategy, combos[c].evict, g, tg.ttft_ms,
                                           tg.tpot_ms});
      }
      for (int b : cfg.throughput_batches) {
        const auto t0 = Clock::now();
        for (int req = 0; req < b; ++req)
          (void)greedy_generate(model, store, ids, inst, plan, cfg.generation_length, ev);
        const double seconds = ms_since(t0) / 1000.0;
        report.throughput.push_back(
            {combos[c].strategy, combos[c].evict, b,
             static_cast<double>(b) * static_cast<double>(cfg.generation_length) / seconds});
      }
    }
  }

  report.assertions = evaluate_assertions(report, cfg.acceptance);
  return report;
}

bool BenchReport::all_passed() const {
  return std::all_of(assertions.begin(), assertions.end(),
                     [](const AssertionResult& a) { return a.passed; });
}

double select_metric(const BenchReport& report, std::string_view selector) {
  const auto colon = selector.rfind(':');
  A3KV_CHECK(colon != std::string_view::npos, ErrorKind::kConfig,
             "assertion selector '" + std::string(selector) + "' lacks ':<metric>'");
  std::string row_part(selector.substr(0, colon));
  const std::string metric(selector.substr(colon + 1));
  bool evict = false;
  if (const auto plus = row_part.find("+evict"); plus != std::string::npos) {
    evict = true;
    row_part.erase(plus);
  }
  std::optional<double> r;
  if (const auto at = row_part.find('@'); at != std::string::npos) {
    r = std::stod(row_part.substr(at + 1));
    row_part.erase(at);
  }
  const Strategy strategy = parse_strategy(row_part);

  if (r && strategy == Strategy::kAttentionAware) {
    for (const auto& row : report.r_sweep) {
      if (std::abs(row.r - *r) > 1e-9 || evict) continue;
      if (metric == "gen_agree_frac") return row.gen_agree_frac;
      if (metric == "first_token_agree") return row.first_token_agree;
      if (metric == "attn_l2_mean") return row.attn_l2_mean;
    }
  }
  for (const auto& row : report.rows) {
    if (row.strategy != strategy || row.evict != evict) continue;
    if (r && std::abs(row.r - *r) > 1e-9) continue;
    if (metric == "ttft_ms") return row.ttft_ms;
    if (metric == "tpot_ms") return row.tpot_ms;
    if (metric == "flops_prefill") return row.flops_prefill;
    if (metric == "hit_rate") return row.hit_rate;
    if (metric == "first_token_agree") return row.first_token_agree;
    if (metric == "gen_agree_frac") return row.gen_agree_frac;
    if (metric == "peak_kv_floats") return static_cast<double>(row.peak_kv_floats);
    if (metric == "n") return row.n;
    if (metric == "attn_l2_mean") return mean(row.attn_l2_by_layer);
    throw Error(ErrorKind::kConfig, "unknown metric '" + metric + "'");
  }
  throw Error(ErrorKind::kConfig, "no report row matches '" + std::string(selector) + "'");
}

std::vector<AssertionResult> evaluate_assertions(const BenchReport& report,
                                                 const std::vector<Assertion>& assertions) {
  std::vector<AssertionResult> out;
  for (const auto& a : assertions) {
    AssertionResult res;
    res.name = a.name;
    res.op = a.op;
    res.lhs = select_metric(report, a.lhs);
    char* end = nullptr;
    const double literal = std::strtod(a.rhs.c_str(), &end);
    res.rhs = (end && *end == '\0' && !a.rhs.empty()) ? literal : select_metric(report, a.rhs);
    if (a.op == "<") res.passed = res.lhs < res.rhs;
    else if (a.op == "<=") res.passed = res.lhs <= res.rhs;
    else if (a.op == ">") res.passed = res.lhs > res.rhs;
    else if (a.op == ">=") res.passed = res.lhs >= res.rhs;
    else if (a.op == "==") res.passed = res.lhs == res.rhs;
    else throw Error(ErrorKind::kConfig, "unknown assertion operator '" + a.op + "'");
    out.push_back(res);
  }
  return out;
}

std::string report_csv(const BenchReport& report) {
  std::ostringstream os;
  os << "strategy,r,evict,n,L,ttft_ms,tpot_ms,flops_prefill,attn_l2_by_layer,hit_rate,"
        "first_token_agree,gen_agree_frac,peak_kv_floats\n";
  for (const auto& row : report.rows) {
    std::string l2;
    for (std::size_t i = 0; i < row.attn_l2_by_layer.size(); ++i)
      l2 += (i ? ";" : "") + fmt(row.attn_l2_by_layer[i]);
    os << strategy_name(row.strategy) << ',' << fmt(row.r) << ',' << (row.evict ? 1 : 0) << ','
       << row.n << ',' << row.n_layers << ',' << fmt(row.ttft_ms) << ',' << fmt(row.tpot_ms) << ','
       << fmt(row.flops_prefill) << ',' << l2 << ',' << fmt(row.hit_rate) << ','
       << fmt(row.first_token_agree) << ',' << fmt(row.gen_agree_frac) << ','
       << row.peak_kv_floats << '\n';
  }
  return os.str();
}

std::string throughput_csv(const BenchReport& report) {
  std::ostringstream os;
  os << "strategy,evict,batch,tokens_per_sec\n";
  for (const auto& t : report.throughput)
    os << strategy_name(t.strategy) << ',' << (t.evict ? 1 : 0) << ',' << t.batch << ','
       << fmt(t.tokens_per_sec) << '\n';
  return os.str();
}

std::string r_sweep_csv(const BenchReport& report) {
  std::ostringstream os;
  os << "r,gen_agree_frac,first_token_agree,attn_l2_mean\n";
  for (const auto& s : report.r_sweep)
    os << fmt(s.r) << ',' << fmt(s.gen_agree_frac) << ',' << fmt(s.first_token_agree) << ','
       << fmt(s.attn_l2_mean) << '\n';
  return os.str();
}

std::string generation_sweep_csv(const BenchReport& report) {
  std::ostringstream os;
  os << "strategy,evict,generation_length,ttft_ms,tpot_ms\n";
  for (const auto& g : report.generation_sweep)
    os << strategy_name(g.strategy) << ',' << (g.evict ? 1 : 0) << ',' << g.generation_length
       << ',' << fmt(g.ttft_ms) << ',' << fmt(g.tpot_ms) << '\n';
  return os.str();
}

std::string report_json(const BenchReport& report, bool include_timing) {
  nlohmann::ordered_json j;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& row : report.rows) {
    nlohmann::ordered_json o;
    o["strategy"] = strategy_name(row.strategy);
    o["r"] = row.r;
    o["evict"] = row.evict;
    o["n"] = row.n;
    o["L"] = row.n_layers;
    if (include_timing) {
      o["ttft_ms"] = row.ttft_ms;
      o["tpot_ms"] = row.tpot_ms;
    }
    o["flops_prefill"] = row.flops_prefill;
    o["attn_l2_by_layer"] = row.attn_l2_by_layer;
    o["hit_rate"] = row.hit_rate;  // NaN serializes as null
    o["first_token_agree"] = row.first_token_agree;
    o["gen_agree_frac"] = row.gen_agree_frac;
    o["peak_kv_floats"] = row.peak_kv_floats;
    j["rows"].push_back(std::move(o));
  }
  j["r_sweep"] = nlohmann::ordered_json::array();
  for (const auto& s : report.r_sweep) {
    j["r_sweep"].push_back({{"r", s.r},
                            {"gen_agree_frac", s.gen_agree_frac},
                            {"first_token_agree", s.first_token_agree},
                            {"attn_l2_mean", s.attn_l2_mean}});
  }
  if (include_timing) {
    j["throughput"] = nlohmann::ordered_json::array();
    for (const auto& t : report.throughput) {
      j["throughput"].push_back({{"strategy", strategy_name(t.strategy)},
                                 {"evict", t.evict},
                                 {"batch", t.batch},
                                 {"tokens_per_sec", t.tokens_per_sec}});
    }
    j["generation_sweep"] = nlohmann::ordered_json::array();
    for (const auto& g : report.generation_sweep) {
      j["generation_sweep"].push_back({{"strategy", strategy_name(g.strategy)},
                                       {"evict", g.evict},
                                       {"generation_length", g.generation_length},
                                       {"ttft_ms", g.ttft_ms},
                                       {"tpot_ms", g.tpot_ms}});
    }
  }
  j["assertions"] = nlohmann::ordered_json::array();
  for (const auto& a : report.assertions) {
    j["assertions"].push_back(
        {{"name", a.name}, {"lhs", a.lhs}, {"op", a.op}, {"rhs", a.rhs}, {"passed", a.passed}});
  }
  return j.dump(2) + "\n";
}

}  // namespace a3kv
