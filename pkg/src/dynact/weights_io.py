"""Flat tensor container (safetensors-compatible layout) and toy-model factory.

Layout: an 8-byte little-endian unsigned header length, a JSON header mapping
tensor name -> {"dtype": "F32", "shape": [...], "data_offsets": [begin, end]},
then the raw little-endian f32 payload. Offsets are relative to the start of
the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import LoadError
from .model import ModelConfig, ModelWeights, expected_tensor_shapes, weights_from_tensors
from .tensor import F32

_HEADER_LEN_FMT = "<Q"


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write a name->array map; names are sorted so identical inputs give
    byte-identical files."""
    names = sorted(tensors)
    header: dict[str, dict] = {}
    offset = 0
    payload = []
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = arr.tobytes()
        header[name] = {
            "dtype": "F32",
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        payload.append(raw)
        offset += len(raw)
    header_bytes = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack(_HEADER_LEN_FMT, len(header_bytes)))
        f.write(header_bytes)
        for raw in payload:
            f.write(raw)


def read_tensors(path) -> dict[str, np.ndarray]:
    """Parse a container file into a name->float32 array map."""
    p = Path(path)
    if not p.exists():
        raise LoadError(f"weight file not found: {p}")
    blob = p.read_bytes()
    if len(blob) < 8:
        raise LoadError(f"weight file too short for header length: {p}")
    (header_len,) = struct.unpack(_HEADER_LEN_FMT, blob[:8])
    if 8 + header_len > len(blob):
        raise LoadError(f"header length {header_len} exceeds file size in {p}")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"unparseable tensor header in {p}: {exc}") from exc
    if not isinstance(header, dict):
        raise LoadError(f"tensor header must be a JSON object in {p}")

    payload = blob[8 + header_len :]
    tensors: dict[str, np.ndarray] = {}
    for name, meta in header.items():
        if name == "__metadata__":
            continue
        if meta.get("dtype") != "F32":
            raise LoadError(f"tensor {name!r}: unsupported dtype {meta.get('dtype')!r}")
        shape = tuple(meta.get("shape", ()))
        begin, end = meta.get("data_offsets", (0, 0))
        expected_bytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if end - begin != expected_bytes:
            raise LoadError(
                f"tensor {name!r}: data_offsets span {end - begin} bytes, "
                f"shape {shape} needs {expected_bytes}"
            )
        if end > len(payload):
            raise LoadError(f"tensor {name!r}: data_offsets exceed payload size")
        arr = np.frombuffer(payload[begin:end], dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(F32, copy=True)
    return tensors


def load_weights(path, config: ModelConfig) -> ModelWeights:
    """Load and validate a full model; errors name the offending tensor."""
    return weights_from_tensors(read_tensors(path), config)


def random_weights(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Deterministic random initialization for every tensor the config needs.

    Scales keep the residual stream bounded through a handful of layers so
    toy generations stay finite.
    """
    rng = np.random.default_rng(seed)
    d, dff = config.d_model, config.d_ff
    tensors: dict[str, np.ndarray] = {}

    def normal(shape, scale):
        return (rng.standard_normal(shape) * scale).astype(F32)

    tensors["embed.weight"] = normal((config.vocab_size, d), 0.1)
    tensors["final_norm.gain"] = np.ones(d, dtype=F32)
    tensors["lm_head.weight"] = normal((config.vocab_size, d), 1.0 / np.sqrt(d))
    for i in range(config.n_layers):
        p = f"layers.{i}."
        for name in ("attn.q.weight", "attn.k.weight", "attn.v.weight", "attn.o.weight"):
            tensors[p + name] = normal((d, d), 1.0 / np.sqrt(d))
        tensors[p + "ffn.gate.weight"] = normal((dff, d), 1.0 / np.sqrt(d))
        tensors[p + "ffn.up.weight"] = normal((dff, d), 1.0 / np.sqrt(d))
        tensors[p + "ffn.down.weight"] = normal((d, dff), 1.0 / np.sqrt(dff))
        tensors[p + "norm1.gain"] = np.ones(d, dtype=F32)
        tensors[p + "norm2.gain"] = np.ones(d, dtype=F32)
    assert set(tensors) == set(expected_tensor_shapes(config))
    return tensors


def make_toy_model(config: ModelConfig, seed: int, path) -> None:
    """Write a randomly initialized model plus its JSON config sidecar."""
    write_tensors(path, random_weights(config, seed))
    config.save(str(path) + ".json")
