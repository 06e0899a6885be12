// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "a3kv/error.hpp"
#include "a3kv/kv_cache.hpp"
#include "test_support.hpp"

using namespace a3kv;
using a3kv::test::max_abs_diff;
using a3kv::test::random_tokens;
using a3kv::test::tiny_config;

namespace {

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("a3kv_test_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error thrown");
  return ErrorKind::kIo;
}

std::vector<ChunkKV> chunked(const ModelWeights& w, const std::vector<std::uint32_t>& tokens,
                             const std::vector<std::size_t>& lens) {
  std::vector<ChunkKV> out;
  std::size_t at = 0;
  for (std::size_t len : lens) {
    out.push_back(precompute_chunk(std::span(tokens).subspan(at, len), w));
    at += len;
  }
  return out;
}

}  // namespace

TEST_CASE("chunk ids") {
  const Digest fp7 = model_fingerprint(tiny_config(7));
  const Digest fp8 = model_fingerprint(tiny_config(8));
  const std::vector<std::uint32_t> a = {1, 2}, b = {2, 1};
  CHECK(chunk_id(a, fp7) == chunk_id(a, fp7));
  CHECK(chunk_id(a, fp7) != chunk_id(b, fp7));
  CHECK(chunk_id(a, fp7) != chunk_id(a, fp8));
  CHECK(to_hex(chunk_id(a, fp7)).size() == 64);
  CHECK(digest_from_hex(to_hex(fp7)) == fp7);
}

TEST_CASE("sha256 known answer") {
  const std::string abc = "abc";
  const auto d = sha256(std::span(reinterpret_cast<const std::uint8_t*>(abc.data()), 3));
  CHECK(to_hex(d) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("precompute: single token stores x W_k at every layer") {
  const auto w = init_model(tiny_config());
  const std::vector<std::uint32_t> one = {11};
  const ChunkKV c = precompute_chunk(one, w);
  CHECK(c.length() == 1);
  CHECK_FALSE(c.rope_applied());
  HiddenStates h;
  h.x = embed(w, one);
  h.positions = {0};
  for (int l = 0; l < 4; ++l) {
    const auto& lw = w.layers[static_cast<std::size_t>(l)];
    const Matrix k = matmul(rms_norm(h.x, lw.attn_norm), lw.wk);
    for (std::size_t hh = 0; hh < 2; ++hh) {
      const auto& stored = c.layers[static_cast<std::size_t>(l)].heads[hh].keys;
      CHECK(std::equal(stored.begin(), stored.end(), k.data.begin() + hh * 8));
    }
    h = layer_forward(w, h, l).hidden;
  }
  CHECK(kind_of([&] { (void)precompute_chunk({}, w); }) == ErrorKind::kInput);
}

TEST_CASE("split_into_chunks") {
  const auto tokens = random_tokens(1034, 32, 1);
  const auto parts = split_into_chunks(tokens, 512);
  REQUIRE(parts.size() == 3);
  CHECK(parts[0].size() == 512);
  CHECK(parts[1].size() == 512);
  CHECK(parts[2].size() == 10);
  CHECK(split_into_chunks(tokens).size() == 3);
}

TEST_CASE("512-token chunk has 512 rows per layer") {
  const auto w = init_model(tiny_config());
  const auto tokens = random_tokens(512, 32, 9);
  const auto c = precompute_chunk(tokens, w);
  for (const auto& l : c.layers) CHECK(l.length() == 512);
}

TEST_CASE("persistence round trip and corruption") {
  const auto w = init_model(tiny_config());
  TempDir dir("persist");
  const auto c = precompute_chunk(random_tokens(13, 32, 2), w);
  CHECK(store_chunk(c, dir.path));
  CHECK_FALSE(store_chunk(c, dir.path));  // idempotent
  CHECK(load_chunk(c.id, dir.path) == c);

  const auto bytes = encode_chunk(c);
  CHECK(decode_chunk(bytes) == c);
  for (std::size_t at : {std::size_t{0}, std::size_t{5}, std::size_t{120}, bytes.size() / 2,
                         bytes.size() - 1}) {
    auto bad = bytes;
    bad[at] ^= 0x01;
    CHECK(kind_of([&] { (void)decode_chunk(bad); }) == ErrorKind::kIntegrity);
  }
  auto truncated = bytes;
  truncated.resize(bytes.size() - 7);
  CHECK(kind_of([&] { (void)decode_chunk(truncated); }) == ErrorKind::kIntegrity);

  const Digest missing = chunk_id(std::vector<std::uint32_t>{9, 9, 9}, c.fingerprint);
  CHECK(kind_of([&] { (void)load_chunk(missing, dir.path); }) == ErrorKind::kNotFound);

  // corrupt the stored file in place
  const auto path = DirectoryStore(dir.path).path_for(c.id);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(200);
    char ch = 0;
    f.read(&ch, 1);
    f.seekp(200);
    ch = static_cast<char>(ch ^ 0x40);
    f.write(&ch, 1);
  }
  CHECK(kind_of([&] { (void)load_chunk(c.id, dir.path); }) == ErrorKind::kIntegrity);
}

TEST_CASE("header layout") {
  const auto w = init_model(tiny_config());
  const auto c = precompute_chunk(random_tokens(5, 32, 3), w);
  const auto bytes = encode_chunk(c);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "A3KV");
  CHECK(bytes[4] == 1);
  // 4 + 4 + 32 + 32 + 4*4 + 1 + 1 + 2 = 92 header bytes, then tokens, K, V, digest
  const std::size_t payload = 5 * 4 + 2 * (4 * 2 * 5 * 8) * 4;
  CHECK(bytes.size() == 92 + payload + 32);
  CHECK(bytes[92] == c.token_ids[0]);
}

TEST_CASE("concat offsets and contracts") {
  const auto w = init_model(tiny_config());
  const auto tokens = random_tokens(1034, 32, 4);
  const auto chunks = chunked(w, tokens, {10, 512, 512});
  const FusedCache f = concat_chunks(chunks);
  CHECK(f.length() == 1034);
  CHECK_FALSE(f.rope_recovered);
  REQUIRE(f.segments.spans.size() == 4);
  CHECK(f.segments.spans[0].role == SegmentRole::kSystem);
  CHECK(f.segments.spans[0].start == 0);
  CHECK(f.segments.spans[1].start == 10);
  CHECK(f.segments.spans[2].start == 522);
  CHECK(f.segments.spans[3].role == SegmentRole::kQuestion);
  CHECK(f.segments.spans[3].length == 0);
  for (const auto& l : f.layers) CHECK(l.length() == 1034);

  const auto single = concat_chunks(chunked(w, tokens, {3}));
  CHECK(single.length() == 3);
  CHECK(single.segments.spans[0].length == 3);
  CHECK(single.segments.document_token_count() == 0);

  CHECK(kind_of([&] { (void)concat_chunks({}); }) == ErrorKind::kInput);
  auto other = init_model(tiny_config(8));
  std::vector<ChunkKV> mixed = {chunks[0], precompute_chunk(std::span(tokens).first(4), other)};
  CHECK(kind_of([&] { (void)concat_chunks(mixed); }) == ErrorKind::kIncompatible);
}

TEST_CASE("recover_positions: layer 0 and system span exact, layer 2 differs") {
  const auto w = init_model(tiny_config());
  const auto tokens = random_tokens(40, 32, 5);
  const auto fused = recover_positions(concat_chunks(chunked(w, tokens, {8, 16, 16})), w.config);
  CHECK(fused.rope_recovered);
  const auto oracle = full_prefill(w, tokens);

  for (std::size_t h = 0; h < 2; ++h) {
    CHECK(max_abs_diff(fused.layers[0].heads[h].keys, oracle.cache[0].heads[h].keys) <= 1e-6);
    CHECK(max_abs_diff(fused.layers[0].heads[h].values, oracle.cache[0].heads[h].values) <=
          1e-6);
    for (std::size_t l = 0; l < 4; ++l) {
      const auto& a = fused.layers[l].heads[h];
      const auto& b = oracle.cache[l].heads[h];
      const std::vector<float> ka(a.keys.begin(), a.keys.begin() + 8 * 8);
      const std::vector<float> kb(b.keys.begin(), b.keys.begin() + 8 * 8);
      CHECK(max_abs_diff(ka, kb) <= 1e-6);
    }
  }
  double gap = 0;
  for (std::size_t h = 0; h < 2; ++h)
    gap = std::max(gap, max_abs_diff(fused.layers[2].heads[h].keys, oracle.cache[2].heads[h].keys));
  CHECK(gap > 1e-3);

  // values untouched, offset 0 unchanged
  const auto raw = concat_chunks(chunked(w, tokens, {8, 16, 16}));
  CHECK(raw.layers[3].heads[1].values == fused.layers[3].heads[1].values);
  CHECK(std::equal(raw.layers[1].heads[0].keys.begin(), raw.layers[1].heads[0].keys.begin() + 8,
                   fused.layers[1].heads[0].keys.begin()));

  CHECK(kind_of([&] { (void)recover_positions(fused, w.config); }) == ErrorKind::kContract);
}

TEST_CASE("layer-0 chunk keys match any longer sequence") {
  const auto w = init_model(tiny_config());
  const auto tokens = random_tokens(30, 32, 6);
  const auto sub = std::span(tokens).subspan(11, 9);
  ChunkKV c = precompute_chunk(sub, w);
  const auto oracle = full_prefill(w, tokens);
  for (std::size_t h = 0; h < 2; ++h) {
    std::vector<float> k = c.layers[0].heads[h].keys;
    for (std::size_t i = 0; i < 9; ++i)
      rope_rotate_inplace(std::span(k).subspan(i * 8, 8), static_cast<std::int64_t>(11 + i),
                          w.config.rope_base);
    const std::vector<float> ref(oracle.cache[0].heads[h].keys.begin() + 11 * 8,
                                 oracle.cache[0].heads[h].keys.begin() + 20 * 8);
    CHECK(max_abs_diff(k, ref) <= 1e-6);
  }
}

TEST_CASE("localize_chunk rotates from zero and flags rope") {
  const auto w = init_model(tiny_config());
  const auto tokens = random_tokens(12, 32, 7);
  const auto c = precompute_chunk(tokens, w);
  const auto local = localize_chunk(c, w.config);
  CHECK(local.rope_applied());
  const auto oracle = full_prefill(w, tokens);
  for (std::size_t l = 0; l < 4; ++l)
    CHECK(max_abs_diff(local.layers[l].heads[0].keys, oracle.cache[l].heads[0].keys) <= 1e-6);
  CHECK(kind_of([&] { (void)localize_chunk(local, w.config); }) == ErrorKind::kContract);
}

TEST_CASE("segment map validation") {
  SegmentMap m;
  m.spans = {{SegmentRole::kSystem, -1, 0, 4},
             {SegmentRole::kDocument, 0, 4, 6},
             {SegmentRole::kQuestion, -1, 10, 3}};
  CHECK_NOTHROW(m.validate());
  CHECK(m.total_length() == 13);
  CHECK(m.document_offsets().size() == 6);
  CHECK(m.question_start() == 10);
  m.spans[1].start = 5;
  CHECK(kind_of([&] { m.validate(); }) == ErrorKind::kContract);
}

TEST_CASE("directory store") {
  const auto w = init_model(tiny_config());
  TempDir dir("store");
  DirectoryStore store(dir.path);
  const auto c = precompute_chunk(random_tokens(6, 32, 8), w);
  CHECK_FALSE(store.contains(c.id));
  CHECK(store.store(c));
  CHECK(store.contains(c.id));
  const auto t0 = std::filesystem::last_write_time(store.path_for(c.id));
  CHECK_FALSE(store.store(c));
  CHECK(std::filesystem::last_write_time(store.path_for(c.id)) == t0);
  CHECK(store.load(c.id) == c);
  const auto hdr = inspect_chunk_file(store.path_for(c.id));
  CHECK(hdr.magic == "A3KV");
  CHECK(hdr.chunk_len == 6);
  CHECK(hdr.id == c.id);
  MemoryStore mem;
  mem.put(c);
  CHECK(mem.load(c.id) == c);
  CHECK(kind_of([&] { (void)mem.load(w.config.seed ? c.fingerprint : c.id); }) ==
        ErrorKind::kNotFound);
}
