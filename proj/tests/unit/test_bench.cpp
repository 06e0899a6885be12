// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <json.hpp>
#include <sstream>

#include "a3kv/bench.hpp"
#include "a3kv/error.hpp"
#include "test_support.hpp"

using namespace a3kv;

namespace {

BenchConfig small_config() {
  BenchConfig c = default_bench_config();
  c.model = test::tiny_config(7);
  c.input.num_chunks = 3;
  c.input.chunk_len = 16;
  c.input.system_len = 4;
  c.input.question_len = 4;
  c.input.instances = 2;
  c.generation_length = 6;
  c.generation_sweep = {10, 100, 300};
  c.throughput_batches = {1, 2, 4, 8};
  c.repetitions = 1;
  c.warmup = 0;
  return c;
}

}  // namespace

TEST_CASE("instances are seeded and shaped") {
  InputRecipe r;
  const auto a = make_instance(r, 258, 5);
  const auto b = make_instance(r, 258, 5);
  const auto c = make_instance(r, 258, 6);
  CHECK(a.all_tokens() == b.all_tokens());
  CHECK(a.all_tokens() != c.all_tokens());
  CHECK(a.length() == 16 + 4 * 64 + 16);
  CHECK(a.chunks().size() == 5);

  r.kind = "needle";
  const auto nd = make_instance(r, 258, 5);
  const std::vector<std::uint32_t> cue(nd.question.end() - 4, nd.question.end());
  bool found = false;
  for (const auto& d : nd.documents)
    found = found || std::search(d.begin(), d.end(), cue.begin(), cue.end()) != d.end();
  CHECK(found);
  r.kind = "zipf";
  CHECK_THROWS_AS((void)make_instance(r, 258, 5), Error);
}

TEST_CASE("self comparison and full recompute losses") {
  const ModelWeights model = init_model(test::tiny_config());
  InputRecipe r;
  r.num_chunks = 3;
  r.chunk_len = 12;
  r.system_len = 4;
  r.question_len = 3;
  const Instance inst = make_instance(r, 32, 2);
  MemoryStore store;
  const auto ids = precompute_instance(model, inst, store);
  const VanillaOracle oracle = make_oracle(model, inst);
  const auto full = run_prefill(model, store, ids, inst, FusionPlan{Strategy::kAttentionAware, 1.0, 0});
  const auto pie = run_prefill(model, store, ids, inst, FusionPlan{Strategy::kNone});
  for (int l = 0; l < 4; ++l) {
    CHECK(attention_l2_loss(oracle.prefill.cache, oracle, l) == 0.0);
    CHECK(attention_l2_loss(oracle.prefill.cache, oracle, l, ProbeRows::kAll) == 0.0);
    CHECK(attention_l2_loss(full.cache, oracle, l) <= 1e-3);
  }
  CHECK(attention_l2_loss(pie.cache, oracle, 0) <= 1e-5);
  CHECK(attention_l2_loss(pie.cache, oracle, 3) > 0.0);
  try {
    (void)attention_l2_loss(pie.cache, oracle, 4);
    FAIL("layer out of range accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kInput);
  }
  CHECK(oracle_topk(oracle, 5).indices.size() == 5);
}

TEST_CASE("greedy generation") {
  const ModelWeights model = init_model(test::tiny_config());
  InputRecipe r;
  r.num_chunks = 2;
  r.chunk_len = 10;
  r.system_len = 3;
  r.question_len = 3;
  const Instance inst = make_instance(r, 32, 3);
  MemoryStore store;
  const auto ids = precompute_instance(model, inst, store);
  const auto one = greedy_generate(model, store, ids, inst, FusionPlan{Strategy::kVanilla}, 1);
  CHECK(one.tokens.size() == 1);
  CHECK(one.step_ms.empty());
  const auto v = greedy_generate(model, store, ids, inst, FusionPlan{Strategy::kVanilla}, 8);
  const auto a =
      greedy_generate(model, store, ids, inst, FusionPlan{Strategy::kAttentionAware, 1.0, 0}, 8);
  CHECK(v.tokens == a.tokens);
  CHECK(v.tokens.front() == one.tokens.front());
  CHECK(v.step_ms.size() == 7);
  CHECK_THROWS_AS((void)generate_from(model, run_prefill(model, store, ids, inst, FusionPlan{}), 0),
                  Error);
}

TEST_CASE("run_bench cardinality, sweeps and determinism") {
  const BenchConfig cfg = small_config();
  const BenchReport a = run_bench(cfg);
  REQUIRE(a.rows.size() == 6);
  CHECK(a.generation_sweep.size() == 18);
  CHECK(a.throughput.size() == 24);
  CHECK(a.r_sweep.size() == 5);
  const auto& vanilla = a.rows[0];
  CHECK(vanilla.strategy == Strategy::kVanilla);
  CHECK(vanilla.gen_agree_frac == 1.0);
  CHECK(vanilla.first_token_agree == 1.0);
  for (double l2 : vanilla.attn_l2_by_layer) CHECK(l2 == 0.0);
  for (const auto& row : a.rows) {
    CHECK(row.ttft_ms >= 0);
    CHECK(row.tpot_ms >= 0);
    CHECK(row.flops_prefill >= 0);
    CHECK(row.gen_agree_frac >= 0);
    CHECK(row.gen_agree_frac <= 1);
    CHECK(row.attn_l2_by_layer.size() == 4);
  }
  CHECK(a.rows[5].hit_rate == 1.0);
  CHECK(std::isnan(a.rows[0].hit_rate));

  BenchConfig c2 = cfg;
  c2.timing = false;
  c2.parallel = true;
  const BenchReport b = run_bench(c2);
  CHECK(report_json(a, false) == report_json(b, false));
}

TEST_CASE("eviction rows and assertions") {
  BenchConfig cfg = small_config();
  cfg.strategies = {Strategy::kVanilla, Strategy::kAttentionAware};
  cfg.eviction = EvictionPolicy{20, 7, true};
  cfg.timing = false;
  cfg.acceptance = {{"vanilla agrees", "vanilla:gen_agree_frac", "==", "1"},
                    {"evict shrinks", "attention_aware+evict:peak_kv_floats", "<",
                     "attention_aware:peak_kv_floats"},
                    {"impossible", "attention_aware@0.15:gen_agree_frac", ">", "2"}};
  const BenchReport rep = run_bench(cfg);
  CHECK(rep.rows.size() == 4);
  REQUIRE(rep.assertions.size() == 3);
  CHECK(rep.assertions[0].passed);
  CHECK(rep.assertions[1].passed);
  CHECK_FALSE(rep.assertions[2].passed);
  CHECK_FALSE(rep.all_passed());
  CHECK_THROWS_AS((void)select_metric(rep, "vanilla:nonsense"), Error);
  CHECK_THROWS_AS((void)select_metric(rep, "head_tail:n"), Error);
}

TEST_CASE("csv and json outputs") {
  BenchConfig cfg = small_config();
  cfg.strategies = {Strategy::kVanilla, Strategy::kNone};
  cfg.timing = false;
  const BenchReport rep = run_bench(cfg);
  const std::string csv = report_csv(rep);
  std::istringstream lines(csv);
  std::string header, row;
  std::getline(lines, header);
  CHECK(header ==
        "strategy,r,evict,n,L,ttft_ms,tpot_ms,flops_prefill,attn_l2_by_layer,hit_rate,"
        "first_token_agree,gen_agree_frac,peak_kv_floats");
  std::getline(lines, row);
  CHECK(row.rfind("vanilla,", 0) == 0);
  CHECK(std::count(row.begin(), row.end(), ';') == 3);
  const auto j = nlohmann::json::parse(report_json(rep));
  CHECK(j["rows"].size() == 2);
  CHECK(j["rows"][1]["strategy"] == "none");
  CHECK(j["rows"][0]["hit_rate"].is_null());
  CHECK(r_sweep_csv(rep).rfind("r,gen_agree_frac", 0) == 0);
}

TEST_CASE("bench config parsing") {
  const auto c = bench_config_from_json(R"({
    "model": {"n_layers": 2, "n_heads": 2, "head_dim": 4, "d_model": 8, "d_ff": 16,
              "vocab_size": 20, "seed": 3},
    "input": {"num_chunks": 2, "chunk_len": 8, "instances": 3},
    "strategies": ["vanilla", "attention_aware"],
    "eviction": {"enabled": true, "capacity": 64},
    "acceptance": [{"name": "x", "lhs": "vanilla:n", "op": ">", "rhs": 1}]
  })");
  CHECK(c.model.n_layers == 2);
  CHECK(c.input.instances == 3);
  CHECK(c.strategies.size() == 2);
  CHECK(c.eviction.enabled);
  CHECK(c.acceptance.size() == 1);

  try {
    (void)bench_config_from_json("{\n  \"r\": 0.1,\n  \"strategies\": [\"none\",]\n}");
    FAIL("malformed json accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kConfig);
    const std::string msg = e.what();
    CHECK(msg.find("line 3") != std::string::npos);
    CHECK(msg.find("column") != std::string::npos);
  }
  CHECK_THROWS_AS((void)bench_config_from_json(R"({"rr": 1})"), Error);
  CHECK_THROWS_AS((void)bench_config_from_json(R"({"repetitions": 0})"), Error);
  CHECK_THROWS_AS((void)bench_config_from_json(R"({"strategies": ["bogus"]})"), Error);

  const BenchConfig q = quick_variant(default_bench_config());
  CHECK(q.input.instances == 1);
  CHECK(q.repetitions == 1);
}

TEST_CASE("timing medians are non-negative") {
  const ModelWeights model = init_model(test::tiny_config());
  InputRecipe r;
  r.num_chunks = 2;
  r.chunk_len = 10;
  const Instance inst = make_instance(r, 32, 1);
  MemoryStore store;
  const auto ids = precompute_instance(model, inst, store);
  const auto t = time_ttft_tpot(model, store, ids, inst, FusionPlan{}, 4, nullptr, 1, 3);
  CHECK(t.ttft_ms > 0);
  CHECK(t.tpot_ms > 0);
  CHECK(t.select_ms >= 0);
  CHECK_THROWS_AS((void)time_ttft_tpot(model, store, ids, inst, FusionPlan{}, 4, nullptr, 0, 0),
                  Error);
}
