// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

#include "a3kv/kv_cache.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <system_error>

#include "a3kv/error.hpp"

namespace a3kv {

namespace {

constexpr char kMagic[4] = {'A', '3', 'K', 'V'};
constexpr std::size_t kHeaderSize = 4 + 4 + 32 + 32 + 4 * 4 + 1 + 1 + 2;
constexpr std::size_t kTrailerSize = 32;

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  template <typename T>
  void pod(T v) { raw(&v, sizeof(T)); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : bytes_(b) {}
  void raw(void* p, std::size_t n) {
    A3KV_CHECK(pos_ + n <= bytes_.size(), ErrorKind::kIntegrity, "chunk file truncated");
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T pod() {
    T v{};
    raw(&v, sizeof(T));
    return v;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::size_t payload_size(std::uint64_t n_layers, std::uint64_t n_heads,
                         std::uint64_t head_dim, std::uint64_t len) {
  return static_cast<std::size_t>(len * 4 + 2 * n_layers * n_heads * len * head_dim * 4);
}

ChunkHeader read_header(ByteReader& r) {
  ChunkHeader h;
  char magic[4];
  r.raw(magic, 4);
  h.magic.assign(magic, 4);
  A3KV_CHECK(std::memcmp(magic, kMagic, 4) == 0, ErrorKind::kIntegrity,
             "chunk file: bad magic");
  h.version = r.pod<std::uint32_t>();
  A3KV_CHECK(h.version == kChunkFormatVersion, ErrorKind::kIntegrity,
             "chunk file: unsupported version " + std::to_string(h.version));
  r.raw(h.fingerprint.data(), 32);
  r.raw(h.id.data(), 32);
  h.n_layers = r.pod<std::uint32_t>();
  h.n_heads = r.pod<std::uint32_t>();
  h.head_dim = r.pod<std::uint32_t>();
  h.chunk_len = r.pod<std::uint32_t>();
  h.dtype = r.pod<std::uint8_t>();
  h.flags = r.pod<std::uint8_t>();
  const auto reserved = r.pod<std::uint16_t>();
  A3KV_CHECK(h.dtype == 0, ErrorKind::kIntegrity, "chunk file: unknown dtype");
  A3KV_CHECK((h.flags & ~1u) == 0 && reserved == 0, ErrorKind::kIntegrity,
             "chunk file: reserved bits set");
  return h;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  A3KV_CHECK(in.good(), ErrorKind::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

void verify_trailer(std::span<const std::uint8_t> bytes) {
  A3KV_CHECK(bytes.size() >= kHeaderSize + kTrailerSize, ErrorKind::kIntegrity,
             "chunk file truncated");
  const auto body = bytes.first(bytes.size() - kTrailerSize);
  const Digest expect = sha256(body);
  A3KV_CHECK(std::equal(expect.begin(), expect.end(), bytes.end() - kTrailerSize),
             ErrorKind::kIntegrity, "chunk file: payload digest mismatch");
}

}  // namespace

Digest model_fingerprint(const ModelConfig& c) {
  Sha256 h;
  static constexpr char kTag[] = "a3kv.model.v1";
  h.update(kTag, sizeof(kTag) - 1);
  const std::int32_t dims[] = {c.n_layers, c.n_heads, c.head_dim, c.d_model, c.d_ff, c.vocab_size};
  h.update(dims, sizeof(dims));
  h.update(&c.rope_base, sizeof(c.rope_base));
  h.update(&c.seed, sizeof(c.seed));
  return h.finish();
}

Digest chunk_id(std::span<const std::uint32_t> token_ids, const Digest& fingerprint) {
  Sha256 h;
  h.update(fingerprint.data(), fingerprint.size());
  h.update(token_ids.data(), token_ids.size_bytes());
  return h.finish();
}

ChunkKV precompute_chunk(std::span<const std::uint32_t> token_ids, const ModelWeights& model) {
  A3KV_CHECK(!token_ids.empty(), ErrorKind::kInput, "precompute_chunk: empty chunk");
  const ModelConfig& cfg = model.config;
  ChunkKV chunk;
  chunk.fingerprint = model_fingerprint(cfg);
  chunk.token_ids.assign(token_ids.begin(), token_ids.end());
  chunk.id = chunk_id(token_ids, chunk.fingerprint);

  std::vector<std::int32_t> pos(token_ids.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int32_t>(i);

  // Same arithmetic as full_prefill over these tokens, but the keys kept for
  // storage are the projections before rotation.
  Matrix x = embed(model, token_ids);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& lw = model.layers[static_cast<std::size_t>(l)];
    const Matrix xn = rms_norm(x, lw.attn_norm);
    Matrix q = matmul(xn, lw.wq);
    const Matrix k_raw = matmul(xn, lw.wk);
    const Matrix v = matmul(xn, lw.wv);
    Matrix k = k_raw;
    rotate_heads(q, pos, cfg);
    rotate_heads(k, pos, cfg);
    LayerKV rotated = LayerKV::empty(cfg.n_heads, cfg.head_dim, true);
    append_rows(rotated, k, v, pos);
    LayerKV stored = LayerKV::empty(cfg.n_heads, cfg.head_dim, false);
    append_rows(stored, k_raw, v, pos);
    chunk.layers.push_back(std::move(stored));
    x = finish_layer(lw, x, attention(q, pos, rotated));
  }
  return chunk;
}

ChunkKV localize_chunk(ChunkKV chunk, const ModelConfig& config) {
  A3KV_CHECK(!chunk.rope_applied(), ErrorKind::kContract,
             "localize_chunk: chunk keys are already rotated");
  const auto hd = static_cast<std::size_t>(config.head_dim);
  for (auto& layer : chunk.layers) {
    for (auto& head : layer.heads) {
      for (std::size_t r = 0; r < head.size(); ++r)
        rope_rotate_inplace(std::span(head.keys).subspan(r * hd, hd), head.positions[r],
                            config.rope_base);
    }
    layer.rope_applied = true;
  }
  return chunk;
}

std::vector<std::vector<std::uint32_t>> split_into_chunks(std::span<const std::uint32_t> tokens,
                                                          std::size_t chunk_len) {
  A3KV_CHECK(chunk_len >= 1, ErrorKind::kConfig, "chunk length must be >= 1");
  std::vector<std::vector<std::uint32_t>> out;
  for (std::size_t i = 0; i < tokens.size(); i += chunk_len) {
    const std::size_t n = std::min(chunk_len, tokens.size() - i);
    out.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                     tokens.begin() + static_cast<std::ptrdiff_t>(i + n));
  }
  return out;
}

std::vector<std::uint8_t> encode_chunk(const ChunkKV& chunk) {
  A3KV_CHECK(!chunk.layers.empty(), ErrorKind::kInput, "encode_chunk: no layers");
  const LayerKV& first = chunk.layers[0];
  const auto n_heads = static_cast<std::uint32_t>(first.heads.size());
  const auto hd = static_cast<std::uint32_t>(first.head_dim);
  const auto len = static_cast<std::uint32_t>(chunk.token_ids.size());
  for (const auto& layer : chunk.layers) {
    A3KV_CHECK(layer.heads.size() == n_heads && layer.head_dim == first.head_dim &&
                   layer.rope_applied == first.rope_applied,
               ErrorKind::kShape, "encode_chunk: layers disagree on shape or flags");
    for (const auto& head : layer.heads) {
      A3KV_CHECK(head.size() == len && head.keys.size() == std::size_t{len} * hd &&
                     head.values.size() == head.keys.size(),
                 ErrorKind::kShape, "encode_chunk: head length differs from token count");
    }
  }

  ByteWriter w;
  w.bytes().reserve(kHeaderSize +
                    payload_size(chunk.layers.size(), n_heads, hd, len) + kTrailerSize);
  w.raw(kMagic, 4);
  w.pod(kChunkFormatVersion);
  w.raw(chunk.fingerprint.data(), 32);
  w.raw(chunk.id.data(), 32);
  w.pod(static_cast<std::uint32_t>(chunk.layers.size()));
  w.pod(n_heads);
  w.pod(hd);
  w.pod(len);
  w.pod(std::uint8_t{0});
  w.pod(static_cast<std::uint8_t>(first.rope_applied ? 1 : 0));
  w.pod(std::uint16_t{0});
  w.raw(chunk.token_ids.data(), chunk.token_ids.size() * sizeof(std::uint32_t));
  for (const auto& layer : chunk.layers)
    for (const auto& head : layer.heads) w.raw(head.keys.data(), head.keys.size() * 4);
  for (const auto& layer : chunk.layers)
    for (const auto& head : layer.heads) w.raw(head.values.data(), head.values.size() * 4);
  const Digest trailer = sha256(w.bytes());
  w.raw(trailer.data(), trailer.size());
  return std::move(w.bytes());
}

ChunkKV decode_chunk(std::span<const std::uint8_t> bytes) {
  verify_trailer(bytes);
  ByteReader r(bytes.first(bytes.size() - kTrailerSize));
  const ChunkHeader h = read_header(r);
  A3KV_CHECK(h.n_layers >= 1 && h.n_heads >= 1 && h.head_dim >= 1 && h.chunk_len >= 1,
             ErrorKind::kIntegrity, "chunk file: zero dimension");
  A3KV_CHECK(bytes.size() == kHeaderSize + payload_size(h.n_layers, h.n_heads, h.head_dim,
                                                        h.chunk_len) + kTrailerSize,
             ErrorKind::kIntegrity, "chunk file: size does not match header dimensions");

  ChunkKV chunk;
  chunk.fingerprint = h.fingerprint;
  chunk.id = h.id;
  chunk.token_ids.resize(h.chunk_len);
  r.raw(chunk.token_ids.data(), chunk.token_ids.size() * 4);
  A3KV_CHECK(chunk_id(chunk.token_ids, chunk.fingerprint) == chunk.id, ErrorKind::kIntegrity,
             "chunk file: chunk id does not match tokens and fingerprint");

  const bool rotated = (h.flags & 1u) != 0;
  const std::size_t row_floats = std::size_t{h.chunk_len} * h.head_dim;
  chunk.layers.assign(h.n_layers, LayerKV::empty(static_cast<int>(h.n_heads),
                                                 static_cast<int>(h.head_dim), rotated));
  for (auto& layer : chunk.layers) {
    for (auto& head : layer.heads) {
      head.keys.resize(row_floats);
      r.raw(head.keys.data(), row_floats * 4);
      head.positions.resize(h.chunk_len);
      for (std::uint32_t i = 0; i < h.chunk_len; ++i)
        head.positions[i] = static_cast<std::int32_t>(i);
    }
  }
  for (auto& layer : chunk.layers) {
    for (auto& head : layer.heads) {
      head.values.resize(row_floats);
      r.raw(head.values.data(), row_floats * 4);
    }
  }
  return chunk;
}

ChunkHeader inspect_chunk_file(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  (void)decode_chunk(bytes);
  ByteReader r(bytes);
  ChunkHeader h = read_header(r);
  h.file_size = bytes.size();
  return h;
}

DirectoryStore::DirectoryStore(std::filesystem::path dir) : dir_(std::move(dir)) {}

std::filesystem::path DirectoryStore::path_for(const Digest& id) const {
  return dir_ / to_hex(id);
}

bool DirectoryStore::contains(const Digest& id) const {
  return std::filesystem::exists(path_for(id));
}

bool DirectoryStore::store(const ChunkKV& chunk) const {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  A3KV_CHECK(!ec, ErrorKind::kIo, "cannot create store directory " + dir_.string());
  const auto target = path_for(chunk.id);
  if (std::filesystem::exists(target)) return false;

  const auto bytes = encode_chunk(chunk);
  std::random_device rd;
  const auto tmp = dir_ / (".tmp-" + to_hex(chunk.id).substr(0, 16) + "-" +
                           std::to_string(rd()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    A3KV_CHECK(out.good(), ErrorKind::kIo, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    A3KV_CHECK(out.good(), ErrorKind::kIo, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, target, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw Error(ErrorKind::kIo, "cannot rename into " + target.string() + ": " + ec.message());
  }
  return true;
}

ChunkKV DirectoryStore::load(const Digest& id) const {
  const auto path = path_for(id);
  A3KV_CHECK(std::filesystem::exists(path), ErrorKind::kNotFound,
             "chunk " + to_hex(id) + " not found in " + dir_.string());
  ChunkKV chunk = decode_chunk(read_file(path));
  A3KV_CHECK(chunk.id == id, ErrorKind::kIntegrity,
             "chunk file " + path.string() + " holds a different chunk id");
  return chunk;
}

void MemoryStore::put(ChunkKV chunk) {
  const Digest id = chunk.id;
  chunks_.insert_or_assign(id, std::move(chunk));
}

ChunkKV MemoryStore::load(const Digest& id) const {
  auto it = chunks_.find(id);
  A3KV_CHECK(it != chunks_.end(), ErrorKind::kNotFound, "chunk " + to_hex(id) + " not found");
  return it->second;
}

bool store_chunk(const ChunkKV& chunk, const std::filesystem::path& dir) {
  return DirectoryStore(dir).store(chunk);
}

ChunkKV load_chunk(const Digest& id, const std::filesystem::path& dir) {
  return DirectoryStore(dir).load(id);
}

std::int32_t SegmentMap::total_length() const {
  return spans.empty() ? 0 : spans.back().start + spans.back().length;
}

std::int32_t SegmentMap::system_length() const {
  return (!spans.empty() && spans.front().role == SegmentRole::kSystem) ? spans.front().length
                                                                        : 0;
}

const Segment& SegmentMap::question() const {
  A3KV_CHECK(!spans.empty() && spans.back().role == SegmentRole::kQuestion,
             ErrorKind::kContract, "segment map has no question span");
  return spans.back();
}

std::vector<std::int32_t> SegmentMap::document_offsets() const {
  std::vector<std::int32_t> out;
  for (const auto& s : spans) {
    if (s.role != SegmentRole::kDocument) continue;
    for (std::int32_t i = 0; i < s.length; ++i) out.push_back(s.start + i);
  }
  return out;
}

std::size_t SegmentMap::document_token_count() const {
  std::size_t n = 0;
  for (const auto& s : spans)
    if (s.role == SegmentRole::kDocument) n += static_cast<std::size_t>(s.length);
  return n;
}

std::vector<Segment> SegmentMap::documents() const {
  std::vector<Segment> out;
  for (const auto& s : spans)
    if (s.role == SegmentRole::kDocument) out.push_back(s);
  return out;
}

void SegmentMap::validate() const {
  A3KV_CHECK(spans.size() >= 2, ErrorKind::kContract,
             "segment map needs a system and a question span");
  A3KV_CHECK(spans.front().role == SegmentRole::kSystem && spans.front().start == 0,
             ErrorKind::kContract, "segment map must start with the system span at offset 0");
  A3KV_CHECK(spans.back().role == SegmentRole::kQuestion, ErrorKind::kContract,
             "segment map must end with the question span");
  std::int32_t next = 0;
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const Segment& s = spans[i];
    A3KV_CHECK(s.start == next && s.length >= 0, ErrorKind::kContract,
               "segment map spans must be contiguous");
    A3KV_CHECK(i == 0 || s.role != SegmentRole::kSystem, ErrorKind::kContract,
               "segment map has more than one system span");
    A3KV_CHECK(i + 1 == spans.size() || s.role != SegmentRole::kQuestion,
               ErrorKind::kContract, "segment map has more than one question span");
    next += s.length;
  }
}

FusedCache concat_chunks(std::span<const ChunkKV> chunks) {
  A3KV_CHECK(!chunks.empty(), ErrorKind::kInput, "concat_chunks: no chunks");
  const ChunkKV& first = chunks[0];
  A3KV_CHECK(!first.layers.empty(), ErrorKind::kInput, "concat_chunks: chunk without layers");
  const bool rotated = first.rope_applied();

  FusedCache fused;
  fused.fingerprint = first.fingerprint;
  fused.layers.reserve(first.layers.size());
  for (const auto& l : first.layers)
    fused.layers.push_back(LayerKV::empty(static_cast<int>(l.heads.size()), l.head_dim, rotated));

  std::int32_t offset = 0;
  for (std::size_t c = 0; c < chunks.size(); ++c) {
    const ChunkKV& chunk = chunks[c];
    A3KV_CHECK(chunk.fingerprint == fused.fingerprint, ErrorKind::kIncompatible,
               "concat_chunks: chunk " + to_hex(chunk.id) + " was produced by another model");
    A3KV_CHECK(chunk.layers.size() == fused.layers.size() && chunk.rope_applied() == rotated,
               ErrorKind::kIncompatible, "concat_chunks: chunk layouts differ");
    const auto len = static_cast<std::int32_t>(chunk.length());
    for (std::size_t l = 0; l < chunk.layers.size(); ++l) {
      const LayerKV& src = chunk.layers[l];
      LayerKV& dst = fused.layers[l];
      A3KV_CHECK(src.heads.size() == dst.heads.size() && src.head_dim == dst.head_dim,
                 ErrorKind::kIncompatible, "concat_chunks: head shapes differ");
      for (std::size_t h = 0; h < src.heads.size(); ++h) {
        HeadKV& out = dst.heads[h];
        const HeadKV& in = src.heads[h];
        out.keys.insert(out.keys.end(), in.keys.begin(), in.keys.end());
        out.values.insert(out.values.end(), in.values.begin(), in.values.end());
        for (std::int32_t i = 0; i < len; ++i) out.positions.push_back(offset + i);
      }
    }
    Segment seg;
    seg.role = c == 0 ? SegmentRole::kSystem : SegmentRole::kDocument;
    seg.doc_index = c == 0 ? -1 : static_cast<int>(c - 1);
    seg.start = offset;
    seg.length = len;
    fused.segments.spans.push_back(seg);
    fused.token_ids.insert(fused.token_ids.end(), chunk.token_ids.begin(), chunk.token_ids.end());
    offset += len;
  }
  fused.segments.spans.push_back(Segment{SegmentRole::kQuestion, -1, offset, 0});
  return fused;
}

FusedCache recover_positions(FusedCache cache, const ModelConfig& config) {
  A3KV_CHECK(!cache.rope_recovered, ErrorKind::kContract,
             "recover_positions: positions already recovered");
  for (const auto& layer : cache.layers) {
    A3KV_CHECK(!layer.rope_applied, ErrorKind::kContract,
               "recover_positions: cache keys already carry rotation");
  }
  const auto hd = static_cast<std::size_t>(config.head_dim);
  for (auto& layer : cache.layers) {
    for (auto& head : layer.heads) {
      for (std::size_t r = 0; r < head.size(); ++r)
        rope_rotate_inplace(std::span(head.keys).subspan(r * hd, hd), head.positions[r],
                            config.rope_base);
    }
    layer.rope_applied = true;
  }
  cache.rope_recovered = true;
  return cache;
}

}  // namespace a3kv
