// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

#include "a3kv/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <set>

#include "a3kv/error.hpp"
#include "counter_rng.hpp"
#include "json_util.hpp"

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

namespace a3kv {

namespace {

constexpr float kNormEps = 1e-6f;

const std::set<std::string> kConfigFields = {
    "n_layers", "n_heads", "head_dim", "d_model", "d_ff",
    "vocab_size", "rope_base", "seed"};

void fill_uniform(Matrix& m, std::uint64_t seed, std::uint64_t stream, double bound) {
  const detail::CounterRng rng(seed, stream);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = rng.uniform(i, bound);
}

// Stream ids are fixed per tensor role so adding a tensor never shifts the
// others.
std::uint64_t layer_stream(int layer, int slot) {
  return 1 + 16 * static_cast<std::uint64_t>(layer) + static_cast<std::uint64_t>(slot);
}

struct RowsForward {
  Matrix out;
  LayerKV kv;
  Matrix q;
};

RowsForward forward_rows(const ModelWeights& w, const HiddenStates& hidden,
                         int layer, const LayerKV* cache_view) {
  const ModelConfig& cfg = w.config;
  const LayerWeights& lw = w.layers[static_cast<std::size_t>(layer)];
  RowsForward r;
  r.kv = LayerKV::empty(cfg.n_heads, cfg.head_dim, true);
  Matrix xn = rms_norm(hidden.x, lw.attn_norm);
  r.q = matmul(xn, lw.wq);
  Matrix k = matmul(xn, lw.wk);
  Matrix v = matmul(xn, lw.wv);
  rotate_heads(r.q, hidden.positions, cfg);
  rotate_heads(k, hidden.positions, cfg);
  append_rows(r.kv, k, v, hidden.positions);
  Matrix attn = cache_view ? attention(r.q, hidden.positions, *cache_view, &r.kv)
                           : attention(r.q, hidden.positions, r.kv);
  r.out = finish_layer(lw, hidden.x, attn);
  return r;
}

float dot(const float* a, const float* b, int n) {
  float s = 0.0f;
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// Number of leading rows with position <= limit.
std::size_t visible_rows(const HeadKV& h, std::int32_t limit) {
  return static_cast<std::size_t>(
      std::upper_bound(h.positions.begin(), h.positions.end(), limit) -
      h.positions.begin());
}

}  // namespace

void ModelConfig::validate() const {
  A3KV_CHECK(n_layers >= 1 && n_heads >= 1 && head_dim >= 1 && d_model >= 1 &&
                 d_ff >= 1 && vocab_size >= 1,
             ErrorKind::kConfig, "model config: all counts must be >= 1");
  A3KV_CHECK(head_dim % 2 == 0, ErrorKind::kConfig,
             "model config: head_dim must be even for RoPE");
  A3KV_CHECK(d_model == n_heads * head_dim, ErrorKind::kConfig,
             "model config: d_model must equal n_heads * head_dim");
  A3KV_CHECK(rope_base > 1.0 && std::isfinite(rope_base), ErrorKind::kConfig,
             "model config: rope_base must be > 1");
}

ModelConfig config_from_json(std::string_view text) {
  const auto j = detail::parse_json(text, "model config");
  A3KV_CHECK(j.is_object(), ErrorKind::kConfig, "model config: expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    A3KV_CHECK(kConfigFields.count(key) != 0, ErrorKind::kConfig,
               "model config: unknown field '" + key + "'");
  }
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.head_dim = j.at("head_dim").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("rope_base")) c.rope_base = j.at("rope_base").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["head_dim"] = c.head_dim;
  j["d_model"] = c.d_model;
  j["d_ff"] = c.d_ff;
  j["vocab_size"] = c.vocab_size;
  j["rope_base"] = c.rope_base;
  j["seed"] = c.seed;
  return j.dump();
}

ModelConfig load_config(const std::filesystem::path& path) {
  return config_from_json(detail::read_text_file(path.string()));
}

ModelWeights init_model(const ModelConfig& config) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto ff = static_cast<std::size_t>(config.d_ff);
  const auto vocab = static_cast<std::size_t>(config.vocab_size);
  const double bound = 1.0 / std::sqrt(static_cast<double>(config.d_model));

  ModelWeights w;
  w.config = config;
  w.embedding = Matrix(vocab, d);
  fill_uniform(w.embedding, config.seed, 0, bound);
  w.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights& lw = w.layers[static_cast<std::size_t>(l)];
    lw.attn_norm.assign(d, 1.0f);
    lw.ffn_norm.assign(d, 1.0f);
    lw.wq = Matrix(d, d);
    lw.wk = Matrix(d, d);
    lw.wv = Matrix(d, d);
    lw.wo = Matrix(d, d);
    lw.w_gate = Matrix(d, ff);
    lw.w_up = Matrix(d, ff);
    lw.w_down = Matrix(ff, d);
    Matrix* slots[] = {&lw.wq, &lw.wk, &lw.wv, &lw.wo, &lw.w_gate, &lw.w_up, &lw.w_down};
    for (int s = 0; s < 7; ++s) fill_uniform(*slots[s], config.seed, layer_stream(l, s), bound);
  }
  w.final_norm.assign(d, 1.0f);
  w.unembed = Matrix(d, vocab);
  fill_uniform(w.unembed, config.seed, layer_stream(config.n_layers, 0), bound);
  return w;
}

namespace {

template <typename Fn>
void for_each_tensor(ModelWeights& w, Fn&& fn) {
  fn(w.embedding.data);
  for (auto& lw : w.layers) {
    fn(lw.attn_norm);
    fn(lw.wq.data);
    fn(lw.wk.data);
    fn(lw.wv.data);
    fn(lw.wo.data);
    fn(lw.ffn_norm);
    fn(lw.w_gate.data);
    fn(lw.w_up.data);
    fn(lw.w_down.data);
  }
  fn(w.final_norm);
  fn(w.unembed.data);
}

}  // namespace

void export_weights(const ModelWeights& weights, std::ostream& out) {
  const std::string json = config_to_json(weights.config);
  const auto len = static_cast<std::uint32_t>(json.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(json.data(), static_cast<std::streamsize>(json.size()));
  for_each_tensor(const_cast<ModelWeights&>(weights), [&](const std::vector<float>& t) {
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(float)));
  });
  A3KV_CHECK(out.good(), ErrorKind::kIo, "export_weights: write failed");
}

ModelWeights import_weights(std::istream& in) {
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  A3KV_CHECK(in.good() && len < (1u << 20), ErrorKind::kIntegrity,
             "import_weights: bad header");
  std::string json(len, '\0');
  in.read(json.data(), len);
  A3KV_CHECK(in.good(), ErrorKind::kIntegrity, "import_weights: truncated config");
  ModelWeights w = init_model(config_from_json(json));
  for_each_tensor(w, [&](std::vector<float>& t) {
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(float)));
    A3KV_CHECK(in.good(), ErrorKind::kIntegrity, "import_weights: truncated tensor data");
  });
  return w;
}

LayerKV LayerKV::empty(int n_heads, int head_dim, bool rope_applied) {
  LayerKV kv;
  kv.head_dim = head_dim;
  kv.rope_applied = rope_applied;
  kv.heads.resize(static_cast<std::size_t>(n_heads));
  return kv;
}

bool LayerKV::is_dense() const {
  for (const auto& h : heads) {
    if (h.positions != heads[0].positions) return false;
  }
  return true;
}

std::size_t LayerKV::float_count() const {
  std::size_t n = 0;
  for (const auto& h : heads) n += h.keys.size() + h.values.size();
  return n;
}

std::size_t resident_floats(const KVCache& cache) {
  std::size_t n = 0;
  for (const auto& l : cache) n += l.float_count();
  return n;
}

void rope_rotate_inplace(std::span<float> vec, std::int64_t position, double rope_base) {
  const std::size_t d = vec.size();
  A3KV_CHECK(d % 2 == 0, ErrorKind::kConfig, "rope: vector dimension must be even");
  for (std::size_t i = 0; i < d / 2; ++i) {
    const double theta =
        std::pow(rope_base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    const double angle = static_cast<double>(position) * theta;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double x0 = vec[2 * i];
    const double x1 = vec[2 * i + 1];
    vec[2 * i] = static_cast<float>(x0 * c - x1 * s);
    vec[2 * i + 1] = static_cast<float>(x0 * s + x1 * c);
  }
}

Matrix rope_rotate(const Matrix& vectors, std::span<const std::int64_t> positions,
                   const ModelConfig& config) {
  A3KV_CHECK(config.head_dim % 2 == 0, ErrorKind::kConfig, "rope: head_dim must be even");
  A3KV_CHECK(vectors.cols == static_cast<std::size_t>(config.head_dim), ErrorKind::kShape,
             "rope: vector dimension must equal head_dim");
  A3KV_CHECK(positions.size() == vectors.rows, ErrorKind::kShape,
             "rope: one position per vector required");
  Matrix out = vectors;
  for (std::size_t i = 0; i < out.rows; ++i)
    rope_rotate_inplace(out.row(i), positions[i], config.rope_base);
  return out;
}

void rotate_heads(Matrix& rows, std::span<const std::int32_t> positions,
                  const ModelConfig& config) {
  A3KV_CHECK(positions.size() == rows.rows, ErrorKind::kShape,
             "rotate_heads: one position per row required");
  const auto hd = static_cast<std::size_t>(config.head_dim);
  for (std::size_t i = 0; i < rows.rows; ++i) {
    auto row = rows.row(i);
    for (std::size_t h = 0; h * hd < row.size(); ++h)
      rope_rotate_inplace(row.subspan(h * hd, hd), positions[i], config.rope_base);
  }
}

std::vector<float> attention_weights(std::span<const float> query,
                                     std::int32_t query_position, const HeadKV& kv) {
  const int hd = static_cast<int>(query.size());
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  const std::size_t visible = visible_rows(kv, query_position);
  std::vector<float> w(kv.size(), 0.0f);
  if (visible == 0) return w;
  float m = -std::numeric_limits<float>::infinity();
  for (std::size_t r = 0; r < visible; ++r) {
    w[r] = dot(query.data(), kv.keys.data() + r * static_cast<std::size_t>(hd), hd) * scale;
    m = std::max(m, w[r]);
  }
  float sum = 0.0f;
  for (std::size_t r = 0; r < visible; ++r) {
    w[r] = std::exp(w[r] - m);
    sum += w[r];
  }
  for (std::size_t r = 0; r < visible; ++r) w[r] /= sum;
  return w;
}

Matrix attention(const Matrix& queries, std::span<const std::int32_t> query_positions,
                 const LayerKV& kv, const LayerKV* extra) {
  const std::size_t n_heads = kv.heads.size();
  const auto hd = static_cast<std::size_t>(kv.head_dim);
  A3KV_CHECK(queries.cols == n_heads * hd, ErrorKind::kShape,
             "attention: query width does not match cache heads");
  A3KV_CHECK(!extra || (extra->heads.size() == n_heads &&
                        static_cast<std::size_t>(extra->head_dim) == hd),
             ErrorKind::kShape, "attention: cache segments disagree on heads");
  A3KV_CHECK(query_positions.size() == queries.rows, ErrorKind::kShape,
             "attention: one position per query row required");
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

  Matrix out(queries.rows, queries.cols);
  std::vector<float> logits;
  for (std::size_t h = 0; h < n_heads; ++h) {
    const HeadKV* segs[2] = {&kv.heads[h], extra ? &extra->heads[h] : nullptr};
    for (std::size_t i = 0; i < queries.rows; ++i) {
      const float* q = queries.data.data() + i * queries.cols + h * hd;
      const std::int32_t pos = query_positions[i];
      std::size_t visible[2] = {0, 0};
      std::size_t total = 0;
      for (int s = 0; s < 2; ++s) {
        if (segs[s]) visible[s] = visible_rows(*segs[s], pos);
        total += visible[s];
      }
      float* dst = out.data.data() + i * out.cols + h * hd;
      if (total == 0) continue;
      logits.resize(total);
      float m = -std::numeric_limits<float>::infinity();
      std::size_t t = 0;
      for (int s = 0; s < 2; ++s) {
        for (std::size_t r = 0; r < visible[s]; ++r, ++t) {
          logits[t] = dot(q, segs[s]->keys.data() + r * hd, static_cast<int>(hd)) * scale;
          m = std::max(m, logits[t]);
        }
      }
      float sum = 0.0f;
      for (std::size_t u = 0; u < total; ++u) {
        logits[u] = std::exp(logits[u] - m);
        sum += logits[u];
      }
      t = 0;
      for (int s = 0; s < 2; ++s) {
        for (std::size_t r = 0; r < visible[s]; ++r, ++t) {
          const float w = logits[t] / sum;
          const float* v = segs[s]->values.data() + r * hd;
          for (std::size_t c = 0; c < hd; ++c) dst[c] += w * v[c];
        }
      }
    }
  }
  return out;
}

Matrix embed(const ModelWeights& weights, std::span<const std::uint32_t> tokens) {
  const auto vocab = static_cast<std::uint32_t>(weights.config.vocab_size);
  Matrix x(tokens.size(), weights.embedding.cols);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    A3KV_CHECK(tokens[i] < vocab, ErrorKind::kInput,
               "token id " + std::to_string(tokens[i]) + " outside vocabulary of " +
                   std::to_string(vocab));
    auto src = weights.embedding.row(tokens[i]);
    std::copy(src.begin(), src.end(), x.row(i).begin());
  }
  return x;
}

Matrix rms_norm(const Matrix& x, std::span<const float> gain) {
  A3KV_CHECK(gain.size() == x.cols, ErrorKind::kShape, "rms_norm: gain width mismatch");
  Matrix out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    auto src = x.row(i);
    double ss = 0.0;
    for (float v : src) ss += static_cast<double>(v) * v;
    const auto inv = static_cast<float>(
        1.0 / std::sqrt(ss / static_cast<double>(x.cols) + kNormEps));
    auto dst = out.row(i);
    for (std::size_t j = 0; j < x.cols; ++j) dst[j] = src[j] * inv * gain[j];
  }
  return out;
}

Matrix finish_layer(const LayerWeights& lw, const Matrix& x, const Matrix& attn) {
  Matrix h = matmul(attn, lw.wo);
  for (std::size_t i = 0; i < h.data.size(); ++i) h.data[i] += x.data[i];
  const Matrix hn = rms_norm(h, lw.ffn_norm);
  Matrix gate = matmul(hn, lw.w_gate);
  const Matrix up = matmul(hn, lw.w_up);
  for (std::size_t i = 0; i < gate.data.size(); ++i) {
    const float g = gate.data[i];
    gate.data[i] = g / (1.0f + std::exp(-g)) * up.data[i];
  }
  Matrix out = matmul(gate, lw.w_down);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += h.data[i];
  return out;
}

std::vector<float> output_logits(const ModelWeights& weights,
                                 std::span<const float> hidden_row) {
  Matrix row(1, hidden_row.size());
  std::copy(hidden_row.begin(), hidden_row.end(), row.data.begin());
  return matmul(rms_norm(row, weights.final_norm), weights.unembed).data;
}

void append_rows(LayerKV& kv, const Matrix& k, const Matrix& v,
                 std::span<const std::int32_t> positions) {
  const auto hd = static_cast<std::size_t>(kv.head_dim);
  A3KV_CHECK(k.rows == v.rows && k.rows == positions.size() &&
                 k.cols == kv.heads.size() * hd && v.cols == k.cols,
             ErrorKind::kShape, "append_rows: shape mismatch");
  for (std::size_t h = 0; h < kv.heads.size(); ++h) {
    HeadKV& head = kv.heads[h];
    for (std::size_t i = 0; i < k.rows; ++i) {
      auto kr = k.row(i).subspan(h * hd, hd);
      auto vr = v.row(i).subspan(h * hd, hd);
      head.keys.insert(head.keys.end(), kr.begin(), kr.end());
      head.values.insert(head.values.end(), vr.begin(), vr.end());
      head.positions.push_back(positions[i]);
    }
  }
}

void write_rows(LayerKV& kv, std::span<const std::size_t> slots, const Matrix& k,
                const Matrix& v) {
  const auto hd = static_cast<std::size_t>(kv.head_dim);
  A3KV_CHECK(k.rows == slots.size() && v.rows == slots.size() &&
                 k.cols == kv.heads.size() * hd && v.cols == k.cols,
             ErrorKind::kShape, "write_rows: shape mismatch");
  for (std::size_t h = 0; h < kv.heads.size(); ++h) {
    HeadKV& head = kv.heads[h];
    for (std::size_t i = 0; i < slots.size(); ++i) {
      A3KV_CHECK(slots[i] < head.size(), ErrorKind::kShape, "write_rows: slot out of range");
      auto kr = k.row(i).subspan(h * hd, hd);
      auto vr = v.row(i).subspan(h * hd, hd);
      std::copy(kr.begin(), kr.end(), head.keys.begin() + static_cast<std::ptrdiff_t>(slots[i] * hd));
      std::copy(vr.begin(), vr.end(), head.values.begin() + static_cast<std::ptrdiff_t>(slots[i] * hd));
    }
  }
}

LayerOutput layer_forward(const ModelWeights& weights, const HiddenStates& hidden,
                          int layer, const LayerKV* cache_view) {
  A3KV_CHECK(layer >= 0 && layer < weights.config.n_layers, ErrorKind::kInput,
             "layer_forward: layer index out of range");
  A3KV_CHECK(hidden.x.rows == hidden.positions.size(), ErrorKind::kShape,
             "layer_forward: one position per hidden row required");
  for (std::size_t i = 1; i < hidden.positions.size(); ++i) {
    A3KV_CHECK(hidden.positions[i - 1] < hidden.positions[i], ErrorKind::kContract,
               "layer_forward: positions must be strictly increasing");
  }
  if (cache_view && !hidden.positions.empty()) {
    for (const auto& h : cache_view->heads) {
      A3KV_CHECK(h.positions.empty() || h.positions.back() < hidden.positions.front(),
                 ErrorKind::kContract, "layer_forward: input positions overlap the cache");
    }
  }
  RowsForward r = forward_rows(weights, hidden, layer, cache_view);
  return LayerOutput{HiddenStates{std::move(r.out), hidden.positions}, std::move(r.kv)};
}

PrefillResult full_prefill(const ModelWeights& weights, std::span<const std::uint32_t> tokens,
                           bool capture_queries) {
  A3KV_CHECK(!tokens.empty(), ErrorKind::kInput, "full_prefill: empty input");
  HiddenStates hs;
  hs.x = embed(weights, tokens);
  hs.positions.resize(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) hs.positions[i] = static_cast<std::int32_t>(i);

  PrefillResult result;
  result.cache.reserve(static_cast<std::size_t>(weights.config.n_layers));
  for (int l = 0; l < weights.config.n_layers; ++l) {
    RowsForward r = forward_rows(weights, hs, l, nullptr);
    result.cache.push_back(std::move(r.kv));
    if (capture_queries) result.queries.push_back(std::move(r.q));
    hs.x = std::move(r.out);
  }
  result.logits = output_logits(weights, hs.x.row(hs.x.rows - 1));
  return result;
}

std::vector<float> decode_step(const ModelWeights& weights, KVCache& cache,
                               std::uint32_t last_token, std::int32_t position) {
  const ModelConfig& cfg = weights.config;
  A3KV_CHECK(cache.size() == static_cast<std::size_t>(cfg.n_layers), ErrorKind::kShape,
             "decode_step: cache layer count differs from model");
  for (const auto& layer : cache) {
    A3KV_CHECK(layer.rope_applied, ErrorKind::kContract,
               "decode_step: cache keys must carry positional rotation");
    for (const auto& h : layer.heads) {
      A3KV_CHECK(h.positions.empty() || h.positions.back() < position, ErrorKind::kContract,
                 "decode_step: position " + std::to_string(position) +
                     " collides with cached rows");
    }
  }
  const std::uint32_t tok[1] = {last_token};
  const std::int32_t pos[1] = {position};
  Matrix x = embed(weights, tok);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& lw = weights.layers[static_cast<std::size_t>(l)];
    const Matrix xn = rms_norm(x, lw.attn_norm);
    Matrix q = matmul(xn, lw.wq);
    Matrix k = matmul(xn, lw.wk);
    const Matrix v = matmul(xn, lw.wv);
    rotate_heads(q, pos, cfg);
    rotate_heads(k, pos, cfg);
    LayerKV& layer = cache[static_cast<std::size_t>(l)];
    append_rows(layer, k, v, pos);
    x = finish_layer(lw, x, attention(q, pos, layer));
  }
  return output_logits(weights, x.row(0));
}

std::uint32_t argmax(std::span<const float> logits) {
  A3KV_CHECK(!logits.empty(), ErrorKind::kInput, "argmax: empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<std::uint32_t>(best);
}

}  // namespace a3kv
