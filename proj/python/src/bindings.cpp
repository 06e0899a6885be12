// Copyright 2026 The a3kv Authors.
// SPDX-License-Identifier: Apache-2.0

// Python bindings for the a3kv core.

#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "a3kv/bench.hpp"
#include "a3kv/error.hpp"
#include "a3kv/eviction.hpp"
#include "a3kv/flops.hpp"
#include "a3kv/fusion.hpp"
#include "a3kv/kv_cache.hpp"
#include "a3kv/model.hpp"
#include "a3kv/tokenizer.hpp"

namespace py = pybind11;
using namespace a3kv;

namespace {

py::array_t<float> to_numpy(std::span<const float> v) {
  py::array_t<float> out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::array_t<float> head_matrix(const std::vector<float>& flat, std::size_t rows, int dim) {
  py::array_t<float> out({static_cast<py::ssize_t>(rows), static_cast<py::ssize_t>(dim)});
  std::copy(flat.begin(), flat.end(), out.mutable_data());
  return out;
}

const HeadKV& head_at(const KVCache& cache, std::size_t layer, std::size_t head) {
  A3KV_CHECK(layer < cache.size() && head < cache[layer].heads.size(), ErrorKind::kShape,
             "layer/head index out of range");
  return cache[layer].heads[head];
}

std::vector<Digest> parse_ids(const std::vector<std::string>& hex) {
  std::vector<Digest> ids;
  for (const auto& h : hex) ids.push_back(digest_from_hex(h));
  return ids;
}

FusionPlan make_plan(const std::string& strategy, double r, int k) {
  FusionPlan plan{parse_strategy(strategy), r, k};
  plan.validate();
  return plan;
}

}  // namespace

PYBIND11_MODULE(_a3kv, m) {
  m.doc() = "Attention-aware KV cache fusion for chunked context reuse.";

  static std::array<PyObject*, 8> kinds{};
  static py::exception<Error> base(m, "Error", PyExc_RuntimeError);
  const std::array<std::pair<ErrorKind, const char*>, 8> names = {{
      {ErrorKind::kConfig, "ConfigError"},
      {ErrorKind::kInput, "InputError"},
      {ErrorKind::kShape, "ShapeError"},
      {ErrorKind::kContract, "ContractError"},
      {ErrorKind::kNotFound, "NotFoundError"},
      {ErrorKind::kIntegrity, "IntegrityError"},
      {ErrorKind::kIncompatible, "IncompatibleError"},
      {ErrorKind::kIo, "IoError"},
  }};
  for (const auto& [kind, name] : names) {
    const std::string qualified = std::string("a3kv._a3kv.") + name;
    PyObject* exc = PyErr_NewException(qualified.c_str(), base.ptr(), nullptr);
    kinds[static_cast<std::size_t>(kind)] = exc;
    m.attr(name) = py::handle(exc);
  }
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      PyErr_SetString(kinds[static_cast<std::size_t>(e.kind())], e.what());
    }
  });

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("n_layers", &ModelConfig::n_layers)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("head_dim", &ModelConfig::head_dim)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("d_ff", &ModelConfig::d_ff)
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("rope_base", &ModelConfig::rope_base)
      .def_readwrite("seed", &ModelConfig::seed)
      .def("validate", &ModelConfig::validate)
      .def("to_json", &config_to_json)
      .def_static("from_json", [](const std::string& text) { return config_from_json(text); })
      .def("fingerprint", [](const ModelConfig& c) { return to_hex(model_fingerprint(c)); })
      .def(py::self == py::self)
      .def("__repr__", [](const ModelConfig& c) { return "ModelConfig(" + config_to_json(c) + ")"; });

  py::class_<ModelWeights>(m, "Model")
      .def(py::init([](const ModelConfig& c) { return init_model(c); }), py::arg("config"))
      .def_readonly("config", &ModelWeights::config)
      .def(
          "prefill",
          [](const ModelWeights& w, const std::vector<std::uint32_t>& tokens) {
            PrefillResult r;
            {
              py::gil_scoped_release release;
              r = full_prefill(w, tokens);
            }
            return to_numpy(r.logits);
          },
          py::arg("tokens"), "Full causal prefill; returns last-position logits.");

  py::class_<ChunkKV>(m, "Chunk")
      .def_property_readonly("id", [](const ChunkKV& c) { return to_hex(c.id); })
      .def_property_readonly("fingerprint", [](const ChunkKV& c) { return to_hex(c.fingerprint); })
      .def_readonly("token_ids", &ChunkKV::token_ids)
      .def_property_readonly("rope_applied", &ChunkKV::rope_applied)
      .def_property_readonly("n_layers", [](const ChunkKV& c) { return c.layers.size(); })
      .def("__len__", &ChunkKV::length)
      .def("keys",
           [](const ChunkKV& c, std::size_t layer, std::size_t head) {
             const auto& h = head_at(c.layers, layer, head);
             return head_matrix(h.keys, h.size(), c.layers[layer].head_dim);
           })
      .def("values",
           [](const ChunkKV& c, std::size_t layer, std::size_t head) {
             const auto& h = head_at(c.layers, layer, head);
             return head_matrix(h.values, h.size(), c.layers[layer].head_dim);
           })
      .def("encode",
           [](const ChunkKV& c) {
             const auto bytes = encode_chunk(c);
             return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
           })
      .def_static("decode",
                  [](const py::bytes& b) {
                    const std::string s = b;
                    return decode_chunk(std::span(reinterpret_cast<const std::uint8_t*>(s.data()),
                                                  s.size()));
                  })
      .def(py::self == py::self);

  m.def(
      "precompute_chunk",
      [](const std::vector<std::uint32_t>& tokens, const ModelWeights& model) {
        return precompute_chunk(tokens, model);
      },
      py::arg("tokens"), py::arg("model"), py::call_guard<py::gil_scoped_release>());
  m.def(
      "split_into_chunks",
      [](const std::vector<std::uint32_t>& tokens, std::size_t chunk_len) {
        return split_into_chunks(tokens, chunk_len);
      },
      py::arg("tokens"), py::arg("chunk_len") = kDefaultChunkLen);
  m.def(
      "chunk_id",
      [](const std::vector<std::uint32_t>& tokens, const ModelConfig& c) {
        return to_hex(chunk_id(tokens, model_fingerprint(c)));
      },
      py::arg("tokens"), py::arg("config"));

  py::class_<ChunkSource>(m, "ChunkSource")
      .def("load", [](const ChunkSource& s, const std::string& id) { return s.load(digest_from_hex(id)); });
  py::class_<DirectoryStore, ChunkSource>(m, "DirectoryStore")
      .def(py::init<std::filesystem::path>(), py::arg("path"))
      .def("store", &DirectoryStore::store, py::arg("chunk"))
      .def("contains",
           [](const DirectoryStore& s, const std::string& id) { return s.contains(digest_from_hex(id)); })
      .def("path_for",
           [](const DirectoryStore& s, const std::string& id) { return s.path_for(digest_from_hex(id)); });
  py::class_<MemoryStore, ChunkSource>(m, "MemoryStore")
      .def(py::init<>())
      .def("put", &MemoryStore::put, py::arg("chunk"))
      .def("contains",
           [](const MemoryStore& s, const std::string& id) { return s.contains(digest_from_hex(id)); });

  py::class_<FusionResult>(m, "FusionResult")
      .def_property_readonly("logits", [](const FusionResult& r) { return to_numpy(r.logits); })
      .def_property_readonly("selected", [](const FusionResult& r) { return r.recompute.indices; })
      .def_property_readonly("length", [](const FusionResult& r) { return r.cache.length(); })
      .def_property_readonly("token_ids", [](const FusionResult& r) { return r.cache.token_ids; })
      .def("trace_json", [](const FusionResult& r) { return trace_to_json(r.trace); })
      .def("keys",
           [](const FusionResult& r, std::size_t layer, std::size_t head) {
             const auto& h = head_at(r.cache.layers, layer, head);
             return head_matrix(h.keys, h.size(), r.cache.layers[layer].head_dim);
           })
      .def("values", [](const FusionResult& r, std::size_t layer, std::size_t head) {
        const auto& h = head_at(r.cache.layers, layer, head);
        return head_matrix(h.values, h.size(), r.cache.layers[layer].head_dim);
      });

  m.def(
      "fused_prefill",
      [](const ModelWeights& model, const ChunkSource& store, const std::vector<std::string>& ids,
         const std::vector<std::uint32_t>& question, const std::string& strategy, double r,
         int k) {
        const FusionPlan plan = make_plan(strategy, r, k);
        const FusionRequest req{parse_ids(ids), question};
        py::gil_scoped_release release;
        return fused_prefill(model, store, req, plan);
      },
      py::arg("model"), py::arg("store"), py::arg("chunk_ids"), py::arg("question"),
      py::arg("strategy") = "attention_aware", py::arg("r") = 0.15, py::arg("k") = 20);
  m.def(
      "vanilla_prefill",
      [](const ModelWeights& model, const std::vector<std::vector<std::uint32_t>>& chunks,
         const std::vector<std::uint32_t>& question) {
        py::gil_scoped_release release;
        return vanilla_prefill(model, chunks, question);
      },
      py::arg("model"), py::arg("chunks"), py::arg("question"));
  m.def(
      "generate",
      [](const ModelWeights& model, const FusionResult& prefill, std::size_t length,
         std::optional<std::size_t> evict_capacity, int evict_kernel) {
        std::optional<EvictionPolicy> policy;
        if (evict_capacity) {
          policy = EvictionPolicy{*evict_capacity, evict_kernel, true};
          policy->validate();
        }
        GenerationRun run;
        {
          py::gil_scoped_release release;
          run = generate_from(model, prefill, length, policy ? &*policy : nullptr);
        }
        py::dict out;
        out["tokens"] = run.tokens;
        out["step_ms"] = run.step_ms;
        out["peak_kv_floats"] = run.peak_kv_floats;
        if (run.eviction) {
          out["retained"] = run.eviction->retained;
          out["resident_bytes"] = run.eviction->resident_bytes;
        }
        return out;
      },
      py::arg("model"), py::arg("prefill"), py::arg("length"),
      py::arg("evict_capacity") = py::none(), py::arg("evict_kernel") = 7);

  m.def("recompute_budget", &recompute_budget, py::arg("r"), py::arg("n"),
        py::arg("document_tokens"));
  m.def("vanilla_flops", &vanilla_flops, py::arg("n"), py::arg("config"));
  m.def(
      "fused_flops",
      [](const std::string& strategy, double r, int k, std::int32_t n, std::int32_t q,
         const ModelConfig& c) { return flops_estimate(make_plan(strategy, r, k), n, q, c); },
      py::arg("strategy"), py::arg("r"), py::arg("k"), py::arg("n"), py::arg("question_len"),
      py::arg("config"));

  m.def(
      "rope_rotate",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> vec, std::int64_t position,
         double base) {
        A3KV_CHECK(vec.ndim() == 1, ErrorKind::kShape, "rope_rotate: expected a 1-D vector");
        std::vector<float> v(vec.data(), vec.data() + vec.size());
        rope_rotate_inplace(v, position, base);
        return to_numpy(v);
      },
      py::arg("vec"), py::arg("position"), py::arg("base") = 10000.0);

  m.def(
      "run_bench",
      [](const std::string& config_json, bool quick) {
        BenchConfig cfg = bench_config_from_json(config_json);
        if (quick) cfg = quick_variant(cfg);
        BenchReport report;
        {
          py::gil_scoped_release release;
          report = run_bench(cfg);
        }
        py::dict out;
        out["json"] = report_json(report);
        out["csv"] = report_csv(report);
        out["passed"] = report.all_passed();
        return out;
      },
      py::arg("config_json"), py::arg("quick") = false);

  m.def("encode_bytes", [](const std::string& s) { return encode_bytes(s); }, py::arg("text"));
  m.def(
      "decode_bytes",
      [](const std::vector<std::uint32_t>& ids) {
        const std::string s = decode_bytes(ids);
        return py::bytes(s);
      },
      py::arg("ids"));
  m.def("parse_token_list", [](const std::string& s) { return parse_token_list(s); },
        py::arg("text"));
  m.attr("BOS") = kBosToken;
  m.attr("EOS") = kEosToken;
}
