// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

// a3kv: precompute chunk stores, generate under any fusion strategy, run
// benchmark sweeps, inspect stored chunk files.
//
// Exit codes: 0 success, 1 usage/config error, 2 data/integrity error,
// 3 assertion failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "a3kv/bench.hpp"
#include "a3kv/error.hpp"
#include "a3kv/eviction.hpp"
#include "a3kv/fusion.hpp"
#include "a3kv/kv_cache.hpp"
#include "a3kv/model.hpp"
#include "a3kv/tokenizer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace a3kv;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitAssertion = 3;

int exit_code_for(ErrorKind kind) {
  return kind == ErrorKind::kConfig ? kExitUsage : kExitData;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  A3KV_CHECK(in.good(), ErrorKind::kIo, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  A3KV_CHECK(out.good(), ErrorKind::kIo, "cannot write " + path.string());
  out << text;
  if (text.empty() || text.back() != '\n') out << '\n';
  A3KV_CHECK(out.good(), ErrorKind::kIo, "write failed: " + path.string());
}

std::vector<std::uint32_t> read_tokens(const fs::path& path, bool bytes) {
  const std::string text = read_file(path);
  return bytes ? encode_bytes(text) : parse_token_list(text);
}

json manifest_entry(const ChunkKV& c, std::string_view role, const std::string& source) {
  return json{{"id", to_hex(c.id)},
              {"role", role},
              {"source", source},
              {"length", c.length()},
              {"tokens", c.token_ids}};
}

// precompute

struct PrecomputeArgs {
  std::string model;
  std::string store;
  std::size_t chunk_len = kDefaultChunkLen;
  std::string system;
  std::string out;
  bool bytes = false;
  std::vector<std::string> inputs;
};

int cmd_precompute(const PrecomputeArgs& a) {
  const ModelConfig cfg = load_config(a.model);
  A3KV_CHECK(a.chunk_len >= 1, ErrorKind::kConfig, "--chunk-len must be >= 1");
  const ModelWeights model = init_model(cfg);
  const DirectoryStore store(a.store);

  std::vector<std::uint32_t> system;
  if (a.system.empty()) {
    A3KV_CHECK(cfg.vocab_size > static_cast<int>(kBosToken), ErrorKind::kConfig,
               "--system is required when the vocabulary has no BOS token");
    system = {kBosToken};
  } else {
    system = read_tokens(a.system, a.bytes);
    A3KV_CHECK(!system.empty(), ErrorKind::kInput, "system prompt is empty: " + a.system);
  }

  json chunks = json::array();
  std::size_t written = 0;
  auto add = [&](std::span<const std::uint32_t> tokens, std::string_view role,
                 const std::string& source) {
    const ChunkKV c = precompute_chunk(tokens, model);
    written += store.store(c);
    chunks.push_back(manifest_entry(c, role, source));
  };
  add(system, "system", a.system.empty() ? "<bos>" : a.system);
  for (const auto& input : a.inputs) {
    const auto tokens = read_tokens(input, a.bytes);
    A3KV_CHECK(!tokens.empty(), ErrorKind::kInput, "input is empty: " + input);
    for (const auto& piece : split_into_chunks(tokens, a.chunk_len)) add(piece, "document", input);
  }

  const json manifest{{"model", json::parse(config_to_json(cfg))},
                      {"fingerprint", to_hex(model_fingerprint(cfg))},
                      {"chunk_len", a.chunk_len},
                      {"store", fs::absolute(a.store).lexically_normal().string()},
                      {"chunks", chunks}};
  const std::string text = manifest.dump(2);
  if (!a.out.empty()) write_file(a.out, text);
  std::cout << text << '\n';
  std::cerr << "precompute: " << chunks.size() << " chunks, " << written << " new files\n";
  return kExitOk;
}

// generate

struct GenerateArgs {
  std::string manifest;
  std::string model;
  std::string store;
  std::string question;
  std::string question_tokens;
  std::string strategy = "attention_aware";
  double r = 0.15;
  int k = 20;
  bool evict = false;
  std::size_t evict_capacity = 1024;
  int evict_kernel = 7;
  std::size_t gen_len = 32;
  std::string trace;
  bool bytes = false;
};

int cmd_generate(const GenerateArgs& a) {
  json manifest;
  try {
    manifest = json::parse(read_file(a.manifest));
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kInput, "manifest " + a.manifest + ": " + e.what());
  }

  ModelConfig cfg;
  std::vector<Digest> ids;
  std::vector<std::vector<std::uint32_t>> chunk_tokens;
  std::string store_dir = a.store;
  try {
    cfg = a.model.empty() ? config_from_json(manifest.at("model").dump()) : load_config(a.model);
    A3KV_CHECK(to_hex(model_fingerprint(cfg)) == manifest.at("fingerprint").get<std::string>(),
               ErrorKind::kIncompatible, "model does not match the manifest fingerprint");
    for (const auto& c : manifest.at("chunks")) {
      ids.push_back(digest_from_hex(c.at("id").get<std::string>()));
      chunk_tokens.push_back(c.at("tokens").get<std::vector<std::uint32_t>>());
    }
    if (store_dir.empty()) store_dir = manifest.at("store").get<std::string>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kInput, "manifest " + a.manifest + ": " + e.what());
  }
  A3KV_CHECK(!ids.empty(), ErrorKind::kInput, "manifest lists no chunks");

  std::vector<std::uint32_t> question;
  if (!a.question.empty()) {
    question = read_tokens(a.question, a.bytes);
  } else {
    question = a.bytes ? encode_bytes(a.question_tokens) : parse_token_list(a.question_tokens);
  }

  FusionPlan plan;
  plan.strategy = parse_strategy(a.strategy);
  plan.r = a.r;
  plan.head_tail_k = a.k;
  plan.validate();
  EvictionPolicy policy{a.evict_capacity, a.evict_kernel, a.evict};
  if (policy.enabled) policy.validate();
  A3KV_CHECK(a.gen_len >= 1, ErrorKind::kConfig, "--gen-len must be >= 1");

  const ModelWeights model = init_model(cfg);
  FusionResult prefill;
  if (plan.strategy == Strategy::kVanilla) {
    prefill = vanilla_prefill(model, chunk_tokens, question);
  } else {
    A3KV_CHECK(fs::is_directory(store_dir), ErrorKind::kIo, "store not found: " + store_dir);
    const DirectoryStore store(store_dir);
    prefill = fused_prefill(model, store, FusionRequest{ids, question}, plan);
  }
  const GenerationRun run = generate_from(model, prefill, a.gen_len, &policy);

  FusionTrace trace = prefill.trace;
  trace.eviction = run.eviction;
  const json trace_json = json::parse(trace_to_json(trace));

  json out{{"tokens", run.tokens}};
  if (a.bytes) out["text"] = decode_bytes(run.tokens);
  if (a.trace.empty()) {
    out["trace"] = trace_json;
  } else {
    write_file(a.trace, trace_json.dump(2));
  }
  std::cout << out.dump(2, ' ', false, json::error_handler_t::replace) << '\n';
  return kExitOk;
}

// bench

struct BenchArgs {
  std::string config;
  std::string out = "bench_out";
  bool quick = false;
};

int cmd_bench(const BenchArgs& a) {
  BenchConfig cfg = bench_config_from_json(read_file(a.config));
  if (a.quick) cfg = quick_variant(cfg);
  const BenchReport report = run_bench(cfg);

  const fs::path dir(a.out);
  write_file(dir / "report.csv", report_csv(report));
  write_file(dir / "throughput.csv", throughput_csv(report));
  write_file(dir / "r_sweep.csv", r_sweep_csv(report));
  write_file(dir / "generation_sweep.csv", generation_sweep_csv(report));
  write_file(dir / "report.json", report_json(report));

  std::cout << report_csv(report);
  for (const auto& r : report.assertions) {
    std::printf("%s  %s: %.6g %s %.6g\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.lhs,
                r.op.c_str(), r.rhs);
  }
  std::cerr << "bench: artifacts written to " << dir.string() << '\n';
  return report.all_passed() ? kExitOk : kExitAssertion;
}

// inspect

int cmd_inspect(const std::string& file) {
  try {
    const ChunkHeader h = inspect_chunk_file(file);
    std::printf("file:         %s\n", file.c_str());
    std::printf("magic:        %s\n", h.magic.c_str());
    std::printf("version:      %u\n", h.version);
    std::printf("fingerprint:  %s\n", to_hex(h.fingerprint).c_str());
    std::printf("id:           %s\n", to_hex(h.id).c_str());
    std::printf("layers:       %u\n", h.n_layers);
    std::printf("heads:        %u\n", h.n_heads);
    std::printf("head_dim:     %u\n", h.head_dim);
    std::printf("tokens:       %u\n", h.chunk_len);
    std::printf("dtype:        %s\n", h.dtype == 0 ? "f32" : "unknown");
    std::printf("flags:        0x%02x\n", h.flags);
    std::printf("rope_applied: %s\n", (h.flags & 1u) ? "true" : "false");
    std::printf("file_size:    %llu\n", static_cast<unsigned long long>(h.file_size));
    std::printf("content hash: ok\n");
    return kExitOk;
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kIntegrity) {
      std::printf("corrupt: %s\n", e.what());
      return kExitData;
    }
    throw;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"a3kv: attention-aware KV cache fusion"};
  app.require_subcommand(1);

  PrecomputeArgs pa;
  auto* pre = app.add_subcommand("precompute", "Precompute chunk KV files and print a manifest");
  pre->add_option("--model", pa.model, "Model config JSON")->required()->check(CLI::ExistingFile);
  pre->add_option("--store", pa.store, "Chunk store directory")->required();
  pre->add_option("--chunk-len", pa.chunk_len, "Tokens per chunk")->capture_default_str();
  pre->add_option("--system", pa.system, "System prompt file (default: BOS token)")
      ->check(CLI::ExistingFile);
  pre->add_option("--out", pa.out, "Also write the manifest to this path");
  pre->add_flag("--bytes", pa.bytes, "Inputs are raw bytes, not token-id lists");
  pre->add_option("inputs", pa.inputs, "Document files")->required()->check(CLI::ExistingFile);

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "Prefill from stored chunks and decode greedily");
  gen->add_option("--manifest", ga.manifest, "Manifest from precompute")
      ->required()
      ->check(CLI::ExistingFile);
  gen->add_option("--model", ga.model, "Model config JSON (default: from manifest)")
      ->check(CLI::ExistingFile);
  gen->add_option("--store", ga.store, "Chunk store directory (default: from manifest)");
  auto* qfile = gen->add_option("--question", ga.question, "Question file")->check(CLI::ExistingFile);
  auto* qtok = gen->add_option("--question-tokens", ga.question_tokens,
                               "Question token ids inline (text under --bytes)");
  qfile->excludes(qtok);
  gen->add_option("--strategy", ga.strategy,
                  "vanilla, full, none, kv_diff, head_tail, attention_aware")
      ->capture_default_str();
  gen->add_option("--r", ga.r, "Recompute ratio")->capture_default_str();
  gen->add_option("--k", ga.k, "head_tail span width")->capture_default_str();
  gen->add_flag("--evict", ga.evict, "Enable KV eviction before decoding");
  gen->add_option("--evict-capacity", ga.evict_capacity, "Rows kept per head")
      ->capture_default_str();
  gen->add_option("--evict-kernel", ga.evict_kernel, "Pooling kernel (odd)")->capture_default_str();
  gen->add_option("--gen-len", ga.gen_len, "Tokens to generate")->capture_default_str();
  gen->add_option("--trace", ga.trace, "Write the trace JSON to this path");
  gen->add_flag("--bytes", ga.bytes, "Question is raw bytes; also print decoded text");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Run a benchmark sweep from a JSON config");
  bench->add_option("config", ba.config, "Bench config JSON")->required()->check(CLI::ExistingFile);
  bench->add_option("--out", ba.out, "Output directory")->capture_default_str();
  bench->add_flag("--quick", ba.quick, "Single seed, reduced grid");

  std::string inspect_file;
  auto* insp = app.add_subcommand("inspect", "Print a chunk file header and verify its hash");
  insp->add_option("file", inspect_file, "Chunk file")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*pre) return cmd_precompute(pa);
    if (*gen) {
      if (ga.question.empty() && ga.question_tokens.empty()) {
        std::cerr << "error: one of --question or --question-tokens is required\n";
        return kExitUsage;
      }
      return cmd_generate(ga);
    }
    if (*bench) return cmd_bench(ba);
    if (*insp) return cmd_inspect(inspect_file);
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
