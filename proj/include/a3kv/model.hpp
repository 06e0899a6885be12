// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

// Deterministic toy decoder-only transformer.
//
// Layer l maps hidden rows X_l to X_{l+1} with a pre-norm block:
//
//   h       = X_l + Attn(RMSNorm(X_l)) W^o
//   X_{l+1} = h + FFN(RMSNorm(h))           FFN = SwiGLU
//
// Queries and keys are rotated per head with RoPE at their absolute
// positions, attention is causal with scale 1/sqrt(head_dim), and the final
// hidden row is normalized and projected onto the vocabulary.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "a3kv/tensor.hpp"

namespace a3kv {

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 2;
  int head_dim = 8;
  int d_model = 16;
  int d_ff = 64;
  int vocab_size = 32;
  double rope_base = 10000.0;
  std::uint64_t seed = 0;

  // Throws Error(kConfig) when any invariant fails.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

// JSON with exactly the ModelConfig field names; rope_base may be omitted.
ModelConfig config_from_json(std::string_view text);
std::string config_to_json(const ModelConfig& config);
ModelConfig load_config(const std::filesystem::path& path);

struct LayerWeights {
  std::vector<float> attn_norm;  // d_model
  Matrix wq, wk, wv, wo;         // d_model × d_model
  std::vector<float> ffn_norm;   // d_model
  Matrix w_gate, w_up;           // d_model × d_ff
  Matrix w_down;                 // d_ff × d_model

  bool operator==(const LayerWeights&) const = default;
};

struct ModelWeights {
  ModelConfig config;
  Matrix embedding;  // vocab × d_model
  std::vector<LayerWeights> layers;
  std::vector<float> final_norm;  // d_model
  Matrix unembed;                 // d_model × vocab

  bool operator==(const ModelWeights&) const = default;
};

// Every matrix entry is uniform in [-1/sqrt(d_model), 1/sqrt(d_model)],
// drawn from a SplitMix64 counter hash keyed by (seed, tensor index, element
// index), so each tensor is independent of the order tensors are filled in.
// Normalization gains start at 1.
ModelWeights init_model(const ModelConfig& config);

// Weight file: u32 LE byte length, config JSON, then every tensor as raw
// little-endian f32 in this order: embedding; per layer attn_norm, wq, wk,
// wv, wo, ffn_norm, w_gate, w_up, w_down; final_norm; unembed.
void export_weights(const ModelWeights& weights, std::ostream& out);
ModelWeights import_weights(std::istream& in);

struct HiddenStates {
  Matrix x;                         // n × d_model
  std::vector<std::int32_t> positions;  // strictly increasing
};

// One head's cache rows, ordered by ascending position.
struct HeadKV {
  std::vector<float> keys;    // rows × head_dim
  std::vector<float> values;  // rows × head_dim
  std::vector<std::int32_t> positions;

  std::size_t size() const { return positions.size(); }
  bool operator==(const HeadKV&) const = default;
};

// Per-layer cache. Dense caches hold the same rows in every head; an evicted
// cache may hold a different subset per head.
struct LayerKV {
  int head_dim = 0;
  bool rope_applied = false;
  std::vector<HeadKV> heads;

  static LayerKV empty(int n_heads, int head_dim, bool rope_applied);

  // Row count of head 0; callers that need a dense cache check is_dense().
  std::size_t length() const { return heads.empty() ? 0 : heads[0].size(); }
  bool is_dense() const;
  std::size_t float_count() const;

  bool operator==(const LayerKV&) const = default;
};

using KVCache = std::vector<LayerKV>;

std::size_t resident_floats(const KVCache& cache);

// Rotates one head_dim-sized vector in place: pair (x_{2i}, x_{2i+1}) turns by
// position * rope_base^(-2i/head_dim).
void rope_rotate_inplace(std::span<float> vec, std::int64_t position,
                         double rope_base);

// Rotates each row of `vectors` (rows × head_dim) at its position.
Matrix rope_rotate(const Matrix& vectors,
                   std::span<const std::int64_t> positions,
                   const ModelConfig& config);

// Rotates every head slice of every row (rows × d_model).
void rotate_heads(Matrix& rows, std::span<const std::int32_t> positions,
                  const ModelConfig& config);

// Softmax weights of one query head-vector over the rows of `kv` whose
// position is <= query_position. Entries for masked rows are 0; the result
// has kv.size() entries.
std::vector<float> attention_weights(std::span<const float> query,
                                     std::int32_t query_position,
                                     const HeadKV& kv);

// Causal multi-head attention. `queries` is rows × (n_heads*head_dim) and
// already rotated. Keys come from `kv` followed by `extra` when given; the
// output is the concatenation of per-head outputs, before W^o.
Matrix attention(const Matrix& queries,
                 std::span<const std::int32_t> query_positions,
                 const LayerKV& kv, const LayerKV* extra = nullptr);

// Building blocks shared by the prefill, decode and fusion paths.
Matrix embed(const ModelWeights& weights, std::span<const std::uint32_t> tokens);
Matrix rms_norm(const Matrix& x, std::span<const float> gain);
// h = x + attn W^o; returns h + FFN(RMSNorm(h)).
Matrix finish_layer(const LayerWeights& layer, const Matrix& x,
                    const Matrix& attn);
std::vector<float> output_logits(const ModelWeights& weights,
                                 std::span<const float> hidden_row);

// Appends (k, v) rows (rows × d_model) to every head.
void append_rows(LayerKV& kv, const Matrix& k, const Matrix& v,
                 std::span<const std::int32_t> positions);
// Overwrites existing slots of a dense cache.
void write_rows(LayerKV& kv, std::span<const std::size_t> slots,
                const Matrix& k, const Matrix& v);

struct LayerOutput {
  HiddenStates hidden;
  LayerKV kv;  // new rows only, rotated at their positions
};

// Runs layer `layer` for the rows in `hidden`, attending to `cache_view`
// (if any) followed by the new rows themselves. Does not mutate the cache.
LayerOutput layer_forward(const ModelWeights& weights,
                          const HiddenStates& hidden, int layer,
                          const LayerKV* cache_view = nullptr);

struct PrefillResult {
  KVCache cache;
  std::vector<float> logits;    // final position
  std::vector<Matrix> queries;  // per layer, rotated; only when captured
};

PrefillResult full_prefill(const ModelWeights& weights,
                           std::span<const std::uint32_t> tokens,
                           bool capture_queries = false);

// Appends one row per layer (and head) for `last_token` at `position`, then
// returns the next-token logits.
std::vector<float> decode_step(const ModelWeights& weights, KVCache& cache,
                               std::uint32_t last_token,
                               std::int32_t position);

// Lowest index wins ties.
std::uint32_t argmax(std::span<const float> logits);

}  // namespace a3kv
