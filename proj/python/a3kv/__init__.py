"""Attention-aware KV cache fusion for chunked context reuse."""

import json as _json

from ._a3kv import (
    BOS,
    EOS,
    Chunk,
    ChunkSource,
    ConfigError,
    ContractError,
    DirectoryStore,
    Error,
    FusionResult,
    IncompatibleError,
    InputError,
    IntegrityError,
    IoError,
    MemoryStore,
    Model,
    ModelConfig,
    NotFoundError,
    ShapeError,
    chunk_id,
    decode_bytes,
    encode_bytes,
    fused_flops,
    fused_prefill,
    generate,
    parse_token_list,
    precompute_chunk,
    recompute_budget,
    rope_rotate,
    split_into_chunks,
    vanilla_flops,
    vanilla_prefill,
)
from ._a3kv import run_bench as _run_bench

__version__ = "0.1.0"


def run_bench(config, quick=False):
    """Run a benchmark sweep; `config` is a dict or JSON text. Returns the parsed report."""
    text = config if isinstance(config, str) else _json.dumps(config)
    out = _run_bench(text, quick)
    report = _json.loads(out["json"])
    report["csv"] = out["csv"]
    report["passed"] = out["passed"]
    return report


def trace(result):
    """Parsed trace of a FusionResult."""
    return _json.loads(result.trace_json())
