// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

// Per-chunk KV precomputation, the content-addressed chunk store, and the
// fused cache that concatenates chunks and re-applies global RoPE.
//
// Chunk file layout (little-endian):
//
//   "A3KV" | u32 version=1 | fingerprint[32] | chunk_id[32]
//   u32 n_layers | u32 n_heads | u32 head_dim | u32 chunk_len
//   u8 dtype (0=f32) | u8 flags (bit0 rope_applied) | u16 reserved=0
//   u32 token_ids[chunk_len]
//   f32 K[layer][head][token][dim] | f32 V[layer][head][token][dim]
//   sha256 of every preceding byte [32]
//
// File name is the lowercase hex of chunk_id.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "a3kv/digest.hpp"
#include "a3kv/model.hpp"

namespace a3kv {

inline constexpr std::size_t kDefaultChunkLen = 512;
inline constexpr std::uint32_t kChunkFormatVersion = 1;

// Hash of every field that determines the weights.
Digest model_fingerprint(const ModelConfig& config);

// sha256(fingerprint || token ids as u32 LE).
Digest chunk_id(std::span<const std::uint32_t> token_ids, const Digest& fingerprint);

// One chunk's KV, computed by a standalone forward of the chunk. Keys are
// stored without rotation (rope_applied = false) unless the chunk has been
// localized for the concatenate-as-is baseline. Head positions are local,
// 0..len-1.
struct ChunkKV {
  Digest id{};
  Digest fingerprint{};
  std::vector<std::uint32_t> token_ids;
  KVCache layers;

  std::size_t length() const { return token_ids.size(); }
  bool rope_applied() const { return !layers.empty() && layers[0].rope_applied; }

  bool operator==(const ChunkKV&) const = default;
};

ChunkKV precompute_chunk(std::span<const std::uint32_t> token_ids, const ModelWeights& model);

// Rotates every key row at its chunk-local position and flags the chunk as
// rotated. The concatenate-as-is baseline builds its cache from these.
ChunkKV localize_chunk(ChunkKV chunk, const ModelConfig& config);

// Splits a token sequence into consecutive chunks of at most chunk_len.
std::vector<std::vector<std::uint32_t>> split_into_chunks(
    std::span<const std::uint32_t> tokens, std::size_t chunk_len = kDefaultChunkLen);

std::vector<std::uint8_t> encode_chunk(const ChunkKV& chunk);
// Verifies magic, version, sizes, trailing digest and chunk id.
ChunkKV decode_chunk(std::span<const std::uint8_t> bytes);

struct ChunkHeader {
  std::string magic;
  std::uint32_t version = 0;
  Digest fingerprint{};
  Digest id{};
  std::uint32_t n_layers = 0;
  std::uint32_t n_heads = 0;
  std::uint32_t head_dim = 0;
  std::uint32_t chunk_len = 0;
  std::uint8_t dtype = 0;
  std::uint8_t flags = 0;
  std::uint64_t file_size = 0;
};

// Reads and fully verifies a chunk file, returning its header. Throws
// Error(kIntegrity) on any mismatch.
ChunkHeader inspect_chunk_file(const std::filesystem::path& path);

class ChunkSource {
 public:
  virtual ~ChunkSource() = default;
  // Throws Error(kNotFound) for unknown ids.
  virtual ChunkKV load(const Digest& id) const = 0;
};

// Directory of chunk files. Writes go to a temporary file renamed into
// place; an existing file for the same id is left untouched.
class DirectoryStore : public ChunkSource {
 public:
  explicit DirectoryStore(std::filesystem::path dir);

  // Returns false when the chunk was already present.
  bool store(const ChunkKV& chunk) const;
  ChunkKV load(const Digest& id) const override;
  bool contains(const Digest& id) const;
  std::filesystem::path path_for(const Digest& id) const;
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

class MemoryStore : public ChunkSource {
 public:
  void put(ChunkKV chunk);
  ChunkKV load(const Digest& id) const override;
  bool contains(const Digest& id) const { return chunks_.count(id) != 0; }

 private:
  std::map<Digest, ChunkKV> chunks_;
};

bool store_chunk(const ChunkKV& chunk, const std::filesystem::path& dir);
ChunkKV load_chunk(const Digest& id, const std::filesystem::path& dir);

enum class SegmentRole { kSystem, kDocument, kQuestion };

struct Segment {
  SegmentRole role = SegmentRole::kSystem;
  int doc_index = -1;  // 0-based for documents, -1 otherwise
  std::int32_t start = 0;
  std::int32_t length = 0;

  bool operator==(const Segment&) const = default;
};

// Ordered, contiguous spans: system at 0, documents, question last.
struct SegmentMap {
  std::vector<Segment> spans;

  std::int32_t total_length() const;
  std::int32_t system_length() const;
  const Segment& question() const;
  std::int32_t question_start() const { return question().start; }
  std::int32_t question_length() const { return question().length; }
  // Ascending global offsets of every document token.
  std::vector<std::int32_t> document_offsets() const;
  std::size_t document_token_count() const;
  std::vector<Segment> documents() const;

  // Throws Error(kContract) unless the spans tile [0, total) with exactly one
  // system span first and one question span last.
  void validate() const;

  bool operator==(const SegmentMap&) const = default;
};

// Concatenated per-layer KV of system + document chunks. Head positions are
// global offsets. The question is never part of this cache; its span is a
// zero-length placeholder until a fused prefill fills it in.
struct FusedCache {
  KVCache layers;
  SegmentMap segments;
  std::vector<std::uint32_t> token_ids;
  Digest fingerprint{};
  bool rope_recovered = false;

  std::int32_t length() const { return static_cast<std::int32_t>(token_ids.size()); }
};

// First chunk is the system prompt, the rest are documents in order.
FusedCache concat_chunks(std::span<const ChunkKV> chunks);

// Rotates every key row by its global offset. Values are untouched. Throws
// Error(kContract) when called on an already recovered or pre-rotated cache.
FusedCache recover_positions(FusedCache cache, const ModelConfig& config);

}  // namespace a3kv
