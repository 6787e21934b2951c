"""Minimal decoder-only transformer runtime.

Architecture: byte embeddings -> N blocks of [RMSNorm -> causal self-attention
-> RMSNorm -> gated FFN] -> final RMSNorm -> logit head. KV-cached greedy (or
seeded temperature) decoding. FFN execution during generation is delegated to
a pluggable strategy; prefill always runs the FFN dense and records the gated
hidden vectors the sparsity engine needs.

No positional encoding by default (positions are implicit via the causal
mask); a config flag enables sinusoidal positions for imported checkpoints.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import CacheOverflowError, ContractViolation, LoadError
from .tensor import (
    F32,
    ACTIVATION_KINDS,
    activation,
    rms_norm,
    rms_norm_rows,
    softmax,
    softmax_rows,
)
from .tokenizer import MIN_VOCAB_SIZE


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    d_ff: int
    n_heads: int
    vocab_size: int
    activation_kind: str = "silu"
    max_seq_len: int = 512
    positional_encoding: str = "none"  # "none" | "sinusoidal"
    rms_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "d_model", "d_ff", "n_heads", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"config {name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ContractViolation(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.vocab_size < MIN_VOCAB_SIZE:
            raise ContractViolation(
                f"vocab_size {self.vocab_size} < {MIN_VOCAB_SIZE} (256 bytes + specials)"
            )
        if self.activation_kind not in ACTIVATION_KINDS:
            raise ContractViolation(f"unknown activation kind {self.activation_kind!r}")
        if self.positional_encoding not in ("none", "sinusoidal"):
            raise ContractViolation(
                f"positional_encoding must be 'none' or 'sinusoidal', got {self.positional_encoding!r}"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_json(self) -> str:
        fields = {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "n_heads": self.n_heads,
            "vocab_size": self.vocab_size,
            "activation_kind": self.activation_kind,
            "max_seq_len": self.max_seq_len,
            "positional_encoding": self.positional_encoding,
            "rms_eps": self.rms_eps,
        }
        return json.dumps(fields, indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise LoadError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise LoadError("config JSON must be an object")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise LoadError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise LoadError(f"config missing required fields: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ModelConfig":
        p = Path(path)
        if not p.exists():
            raise LoadError(f"config file not found: {p}")
        return cls.from_json(p.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Weights


@dataclass(frozen=True)
class LayerWeights:
    """Per-layer tensors. Immutable after load (arrays are write-protected)."""

    attn_q: np.ndarray  # (d_model, d_model)
    attn_k: np.ndarray
    attn_v: np.ndarray
    attn_o: np.ndarray
    ffn_gate: np.ndarray  # (d_ff, d_model)
    ffn_up: np.ndarray  # (d_ff, d_model)
    ffn_down: np.ndarray  # (d_model, d_ff)
    norm1_gain: np.ndarray  # (d_model,)
    norm2_gain: np.ndarray  # (d_model,)
    down_col_norms: np.ndarray = field(default=None)  # (d_ff,), set at load

    def __post_init__(self):
        if self.down_col_norms is None:
            norms = np.linalg.norm(self.ffn_down.astype(np.float64), axis=0).astype(F32)
            norms.setflags(write=False)
            object.__setattr__(self, "down_col_norms", norms)


@dataclass(frozen=True)
class ModelWeights:
    config: ModelConfig
    embed: np.ndarray  # (vocab_size, d_model)
    layers: tuple[LayerWeights, ...]
    final_norm_gain: np.ndarray  # (d_model,)
    lm_head: np.ndarray  # (vocab_size, d_model)


TENSOR_SHAPES = {
    "embed.weight": lambda c: (c.vocab_size, c.d_model),
    "final_norm.gain": lambda c: (c.d_model,),
    "lm_head.weight": lambda c: (c.vocab_size, c.d_model),
}

LAYER_TENSOR_SHAPES = {
    "attn.q.weight": lambda c: (c.d_model, c.d_model),
    "attn.k.weight": lambda c: (c.d_model, c.d_model),
    "attn.v.weight": lambda c: (c.d_model, c.d_model),
    "attn.o.weight": lambda c: (c.d_model, c.d_model),
    "ffn.gate.weight": lambda c: (c.d_ff, c.d_model),
    "ffn.up.weight": lambda c: (c.d_ff, c.d_model),
    "ffn.down.weight": lambda c: (c.d_model, c.d_ff),
    "norm1.gain": lambda c: (c.d_model,),
    "norm2.gain": lambda c: (c.d_model,),
}


def expected_tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Full name -> shape map for the flat-tensor container."""
    shapes = {name: fn(config) for name, fn in TENSOR_SHAPES.items()}
    for i in range(config.n_layers):
        for suffix, fn in LAYER_TENSOR_SHAPES.items():
            shapes[f"layers.{i}.{suffix}"] = fn(config)
    return shapes


def weights_from_tensors(tensors: dict[str, np.ndarray], config: ModelConfig) -> ModelWeights:
    """Validate a name->array map against the config and freeze it."""
    expected = expected_tensor_shapes(config)
    for name, shape in expected.items():
        if name not in tensors:
            raise LoadError(f"missing tensor {name!r}")
        got = tensors[name].shape
        if tuple(got) != shape:
            raise LoadError(
                f"tensor {name!r} has shape {tuple(got)}, expected {shape}"
            )

    def freeze(name):
        arr = np.ascontiguousarray(tensors[name], dtype=F32)
        arr.setflags(write=False)
        return arr

    layers = []
    for i in range(config.n_layers):
        p = f"layers.{i}."
        layers.append(
            LayerWeights(
                attn_q=freeze(p + "attn.q.weight"),
                attn_k=freeze(p + "attn.k.weight"),
                attn_v=freeze(p + "attn.v.weight"),
                attn_o=freeze(p + "attn.o.weight"),
                ffn_gate=freeze(p + "ffn.gate.weight"),
                ffn_up=freeze(p + "ffn.up.weight"),
                ffn_down=freeze(p + "ffn.down.weight"),
                norm1_gain=freeze(p + "norm1.gain"),
                norm2_gain=freeze(p + "norm2.gain"),
            )
        )
    return ModelWeights(
        config=config,
        embed=freeze("embed.weight"),
        layers=tuple(layers),
        final_norm_gain=freeze("final_norm.gain"),
        lm_head=freeze("lm_head.weight"),
    )


# ---------------------------------------------------------------------------
# FFN kernels (dense path; sparse variants live in the sparsity engine)


def gated_hidden(layer: LayerWeights, x: np.ndarray, kind: str) -> np.ndarray:
    """h = act(W_gate x) * (W_up x), the per-neuron gated activations."""
    return activation(kind, layer.ffn_gate @ x) * (layer.ffn_up @ x)


def dense_ffn(layer: LayerWeights, x: np.ndarray, kind: str) -> np.ndarray:
    """Full FFN: W_down [act(W_gate x) * (W_up x)]."""
    return layer.ffn_down @ gated_hidden(layer, x, kind)


# ---------------------------------------------------------------------------
# KV cache


class KvCache:
    """Preallocated per-layer K/V tensors; length grows monotonically."""

    def __init__(self, config: ModelConfig):
        shape = (config.n_layers, config.max_seq_len, config.n_heads, config.head_dim)
        self.k = np.zeros(shape, dtype=F32)
        self.v = np.zeros(shape, dtype=F32)
        self.length = 0
        self.max_seq_len = config.max_seq_len

    def reserve(self, n: int) -> int:
        """Claim the next n positions; returns the first claimed index."""
        if self.length + n > self.max_seq_len:
            raise CacheOverflowError(
                f"kv cache overflow: {self.length} + {n} > {self.max_seq_len}"
            )
        start = self.length
        self.length += n
        return start


# ---------------------------------------------------------------------------
# Prefill trace


@dataclass
class PrefillTrace:
    """Per-layer activation record from the prompt pass.

    hidden[l] is (T, d_ff): the gated hidden vector of every prompt token.
    ffn_inputs[l] is (T, d_model): the normalized FFN inputs, kept for
    threshold calibration.
    """

    hidden: list[np.ndarray]
    ffn_inputs: list[np.ndarray]

    @property
    def n_tokens(self) -> int:
        return self.hidden[0].shape[0] if self.hidden else 0


# ---------------------------------------------------------------------------
# Positional encoding


@lru_cache(maxsize=8)
def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    dim = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / d_model)
    pe = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle)).astype(F32)
    pe.setflags(write=False)
    return pe


def _position_table(config: ModelConfig) -> np.ndarray | None:
    if config.positional_encoding == "sinusoidal":
        return sinusoidal_positions(config.max_seq_len, config.d_model)
    return None


# ---------------------------------------------------------------------------
# Forward passes


def prefill(weights: ModelWeights, prompt_ids: list[int]):
    """Process the whole prompt with causal attention.

    Returns (KvCache, logits for the last position, PrefillTrace). The FFN
    runs dense here regardless of strategy: masks are built from the full
    prompt activations.
    """
    cfg = weights.config
    T = len(prompt_ids)
    if T == 0:
        raise ContractViolation("prompt must be non-empty")
    if T > cfg.max_seq_len:
        raise ContractViolation(f"prompt length {T} exceeds max_seq_len {cfg.max_seq_len}")
    ids = np.asarray(prompt_ids)
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ContractViolation("prompt token id out of vocabulary range")

    H, hd = cfg.n_heads, cfg.head_dim
    scale = F32(1.0 / np.sqrt(hd))
    x = weights.embed[ids].copy()  # (T, d_model)
    pe = _position_table(cfg)
    if pe is not None:
        x = x + pe[:T]

    cache = KvCache(cfg)
    cache.reserve(T)
    neg_inf = F32(np.finfo(F32).min)
    causal = np.triu(np.full((T, T), neg_inf, dtype=F32), k=1)

    trace_hidden: list[np.ndarray] = []
    trace_inputs: list[np.ndarray] = []

    for li, layer in enumerate(weights.layers):
        a = rms_norm_rows(x, layer.norm1_gain, cfg.rms_eps)
        q = (a @ layer.attn_q.T).reshape(T, H, hd).transpose(1, 0, 2)  # (H, T, hd)
        k = (a @ layer.attn_k.T).reshape(T, H, hd)
        v = (a @ layer.attn_v.T).reshape(T, H, hd)
        cache.k[li, :T] = k
        cache.v[li, :T] = v
        kh = k.transpose(1, 0, 2)
        vh = v.transpose(1, 0, 2)
        scores = (q @ kh.transpose(0, 2, 1)) * scale + causal  # (H, T, T)
        attn = softmax_rows(scores)
        ctx = (attn @ vh).transpose(1, 0, 2).reshape(T, cfg.d_model)
        x = x + ctx @ layer.attn_o.T

        b = rms_norm_rows(x, layer.norm2_gain, cfg.rms_eps)
        g = activation(cfg.activation_kind, b @ layer.ffn_gate.T)
        h = g * (b @ layer.ffn_up.T)  # (T, d_ff)
        x = x + h @ layer.ffn_down.T
        trace_inputs.append(b)
        trace_hidden.append(h)

    final = rms_norm_rows(x, weights.final_norm_gain, cfg.rms_eps)
    logits = final[-1] @ weights.lm_head.T
    return cache, logits, PrefillTrace(hidden=trace_hidden, ffn_inputs=trace_inputs)


def decode_step(weights: ModelWeights, cache: KvCache, token_id: int, ffn_fn) -> np.ndarray:
    """Advance one token through the model with the KV cache.

    ffn_fn(layer_idx, layer, x_normed) supplies the generation-phase FFN.
    Returns the logits for the next position.
    """
    cfg = weights.config
    H, hd = cfg.n_heads, cfg.head_dim
    scale = F32(1.0 / np.sqrt(hd))
    pos = cache.reserve(1)

    x = weights.embed[token_id].copy()
    pe = _position_table(cfg)
    if pe is not None:
        x = x + pe[pos]

    for li, layer in enumerate(weights.layers):
        a = rms_norm(x, layer.norm1_gain, cfg.rms_eps)
        q = (layer.attn_q @ a).reshape(H, hd)
        cache.k[li, pos] = (layer.attn_k @ a).reshape(H, hd)
        cache.v[li, pos] = (layer.attn_v @ a).reshape(H, hd)
        kh = cache.k[li, : pos + 1]  # (t, H, hd)
        vh = cache.v[li, : pos + 1]
        scores = np.einsum("thd,hd->ht", kh, q) * scale  # (H, t)
        attn = softmax_rows(scores)
        ctx = np.einsum("ht,thd->hd", attn, vh).reshape(cfg.d_model)
        x = x + layer.attn_o @ ctx

        b = rms_norm(x, layer.norm2_gain, cfg.rms_eps)
        x = x + ffn_fn(li, layer, b)

    final = rms_norm(x, weights.final_norm_gain, cfg.rms_eps)
    return weights.lm_head @ final


# ---------------------------------------------------------------------------
# Generation


@dataclass
class Sampling:
    kind: str = "greedy"  # "greedy" | "temperature"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("greedy", "temperature"):
            raise ContractViolation(f"unknown sampling kind {self.kind!r}")
        if self.kind == "temperature" and self.temperature <= 0:
            raise ContractViolation("temperature must be positive")


@dataclass
class GenerationRequest:
    prompt_ids: list[int]
    max_new_tokens: int
    strategy: object = None  # FfnStrategy; None means dense
    sampling: Sampling = field(default_factory=Sampling)

    def __post_init__(self):
        if not self.prompt_ids:
            raise ContractViolation("prompt must be non-empty")
        if self.max_new_tokens < 0:
            raise ContractViolation("max_new_tokens must be >= 0")


@dataclass
class GenerationResult:
    new_tokens: list[int]
    prefill_seconds: float
    step_seconds: list[float]
    strategy_stats: dict

    @property
    def generation_seconds(self) -> float:
        return float(sum(self.step_seconds))


class _DenseFallback:
    """Stand-in strategy when a request carries none (avoids a circular
    import of the sparsity engine); reports the same stats shape."""

    name = "dense"

    def __init__(self):
        self.ffn_macs = 0
        self.ffn_calls = 0

    def prepare(self, weights, trace):
        self._kind = weights.config.activation_kind
        self._per_call = 3 * weights.config.d_model * weights.config.d_ff

    def on_step_start(self, step_index):
        pass

    def ffn(self, layer_idx, layer, x):
        self.ffn_calls += 1
        self.ffn_macs += self._per_call
        return dense_ffn(layer, x, self._kind)

    def stats(self):
        return {
            "strategy": "dense",
            "ffn_macs": self.ffn_macs,
            "ffn_calls": self.ffn_calls,
            "mean_active_fraction": 1.0,
            "per_layer_active_fraction": None,
        }


def generate(weights: ModelWeights, request: GenerationRequest) -> GenerationResult:
    """Autoregressive decoding with the request's FFN strategy.

    Prefill runs dense and feeds the strategy's mask construction; every
    generation step routes its FFN through the strategy. Greedy sampling
    breaks ties toward the lowest token id. Step timings exclude
    tokenization and prefill.
    """
    cfg = weights.config
    total = len(request.prompt_ids) + request.max_new_tokens
    if total > cfg.max_seq_len:
        raise CacheOverflowError(
            f"prompt {len(request.prompt_ids)} + new {request.max_new_tokens} "
            f"exceeds max_seq_len {cfg.max_seq_len}"
        )

    strategy = request.strategy
    if strategy is None:
        strategy = _DenseFallback()

    t0 = time.perf_counter()
    cache, logits, trace = prefill(weights, request.prompt_ids)
    strategy.prepare(weights, trace)
    prefill_seconds = time.perf_counter() - t0

    sampler = request.sampling
    rng = np.random.default_rng(sampler.seed) if sampler.kind == "temperature" else None

    new_tokens: list[int] = []
    step_seconds: list[float] = []
    for i in range(request.max_new_tokens):
        t_step = time.perf_counter()
        if sampler.kind == "greedy":
            tok = int(np.argmax(logits))
        else:
            probs = softmax(logits.astype(np.float64) / sampler.temperature)
            probs = probs / probs.sum()
            tok = int(rng.choice(len(probs), p=probs))
        new_tokens.append(tok)
        strategy.on_step_start(i)
        logits = decode_step(weights, cache, tok, strategy.ffn)
        step_seconds.append(time.perf_counter() - t_step)

    return GenerationResult(
        new_tokens=new_tokens,
        prefill_seconds=prefill_seconds,
        step_seconds=step_seconds,
        strategy_stats=strategy.stats(),
    )
