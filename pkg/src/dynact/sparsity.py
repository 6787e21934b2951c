"""Neuron-magnitude sparsity engine.

Defines the per-neuron magnitude metric, the cumulative tail-truncation error
(CETT) it induces, the layer-wise threshold search, and the three sparse FFN
execution strategies:

  * TT: per-token threshold truncation. Full gate/up every token, the down
    projection runs only over neurons at or above the layer threshold.
  * Griffin: per-sequence fixed top-k. Masks built once from prompt
    statistics, FFN sliced for the whole generation.
  * TDA: per-sequence thresholded masks. Prompt statistics compared against
    the calibrated layer thresholds, FFN sliced for the whole generation
    with no per-token magnitude computation.

Magnitude of neuron i is |h_i| * ||W_down[:, i]||_2 where h is the gated
hidden vector ("down_weighted", the canonical definition used by the
threshold search); "gated_only" (|h_i| alone) is available for ablation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ContractViolation,
    DegenerateCalibrationError,
    LoadError,
    UndefinedCettError,
)
from .model import LayerWeights, ModelWeights, PrefillTrace, dense_ffn, gated_hidden
from .tensor import F32, activation

MAGNITUDE_DEFS = ("down_weighted", "gated_only")
AGGREGATIONS = ("flocking", "plain_l2")


# ---------------------------------------------------------------------------
# Magnitudes and CETT


def magnitudes_from_hidden(layer: LayerWeights, h: np.ndarray,
                           definition: str = "down_weighted") -> np.ndarray:
    """Per-neuron magnitudes from gated hidden activations (vector or batch)."""
    if definition == "down_weighted":
        return np.abs(h) * layer.down_col_norms
    if definition == "gated_only":
        return np.abs(h)
    raise ContractViolation(f"unknown magnitude definition {definition!r}")


def neuron_magnitudes(layer: LayerWeights, x: np.ndarray, kind: str,
                      definition: str = "down_weighted") -> np.ndarray:
    """Magnitude of every neuron's output contribution for input x."""
    return magnitudes_from_hidden(layer, gated_hidden(layer, x, kind), definition)


def cett(layer: LayerWeights, x: np.ndarray, epsilon: float, kind: str,
         definition: str = "down_weighted") -> float:
    """Relative error of dropping all neurons with magnitude strictly below
    epsilon: ||sum_{i in D} n_i(x)||_2 / ||MLP(x)||_2.

    The numerator is the norm of the summed vector contributions, not the sum
    of magnitudes. D uses strict <, so neurons exactly at epsilon survive.
    """
    if epsilon < 0:
        raise ContractViolation("epsilon must be >= 0")
    h = gated_hidden(layer, x, kind)
    m = magnitudes_from_hidden(layer, h, definition)
    mlp = layer.ffn_down @ h
    denom = float(np.linalg.norm(mlp.astype(np.float64)))
    if denom == 0.0:
        raise UndefinedCettError("dense FFN output has zero norm")
    dropped = m < epsilon
    if not dropped.any():
        return 0.0
    if dropped.all():
        return 1.0
    tail = layer.ffn_down[:, dropped].astype(np.float64) @ h[dropped].astype(np.float64)
    return float(np.linalg.norm(tail) / denom)


class _TailCurve:
    """Per-token precomputation: CETT as a function of epsilon.

    Membership in D depends only on magnitudes, so D(eps) is always a prefix
    of the magnitude-sorted neuron order; cumulative sums of the sorted
    contributions give CETT for any epsilon in O(log d_ff).
    """

    def __init__(self, layer: LayerWeights, h: np.ndarray, definition: str):
        m = magnitudes_from_hidden(layer, h, definition)
        order = np.argsort(m, kind="stable")
        self.sorted_mags = m[order]
        contrib = layer.ffn_down.astype(np.float64) * h.astype(np.float64)[None, :]
        cum = np.cumsum(contrib[:, order], axis=1)
        self.tail_norms = np.linalg.norm(cum, axis=0)
        self.denom = float(self.tail_norms[-1])

    def cett_at(self, epsilon: float) -> float:
        count = int(np.searchsorted(self.sorted_mags, epsilon, side="left"))
        if count == 0:
            return 0.0
        return float(self.tail_norms[count - 1] / self.denom)


_MONOTONE_GRID_POINTS = 9


def _search_over_curves(curves: list[_TailCurve], cett_target: float,
                        constraint: str, rel_tol: float, max_iter: int) -> float:
    if not (0.0 < cett_target < 1.0):
        raise ContractViolation("cett_target must be in (0, 1)")
    if constraint not in ("mean", "max"):
        raise ContractViolation(f"unknown constraint {constraint!r}")
    curves = [c for c in curves if c.denom > 0.0]
    max_mag = max((float(c.sorted_mags[-1]) for c in curves), default=0.0)
    if not curves or max_mag <= 0.0:
        raise DegenerateCalibrationError("all calibration activations are zero")
    agg = np.mean if constraint == "mean" else np.max

    def feasible(eps: float) -> bool:
        return float(agg([c.cett_at(eps) for c in curves])) <= cett_target

    # bisection presumes the feasibility predicate flips once; the summed-tail
    # norm is not monotone in general (dropped contributions can cancel), so
    # spot-check monotonicity on a grid before trusting the result
    seen_infeasible = False
    for eps in np.linspace(0.0, max_mag, _MONOTONE_GRID_POINTS)[1:]:
        if not feasible(float(eps)):
            seen_infeasible = True
        elif seen_infeasible:
            raise ContractViolation(
                "CETT feasibility is not monotone on this calibration data; "
                "a bisection threshold would be unreliable"
            )

    if feasible(max_mag):
        return max_mag
    lo, hi = 0.0, max_mag
    for _ in range(max_iter):
        if hi - lo <= rel_tol * hi:
            break
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def search_threshold(layer: LayerWeights, calibration: list[np.ndarray],
                     cett_target: float, kind: str,
                     definition: str = "down_weighted",
                     constraint: str = "mean",
                     rel_tol: float = 1e-3, max_iter: int = 60) -> float:
    """Largest epsilon whose CETT over the calibration inputs stays within
    the target, found by bisection on [0, max observed magnitude].

    `constraint` selects mean (default) or worst-case aggregation over
    calibration tokens. Tokens whose FFN output is exactly zero are skipped.
    Converges to `rel_tol` relative on the returned epsilon.
    """
    if not calibration:
        raise ContractViolation("calibration set must be non-empty")
    curves = [
        _TailCurve(layer, gated_hidden(layer, x, kind), definition)
        for x in calibration
    ]
    return _search_over_curves(curves, cett_target, constraint, rel_tol, max_iter)


def search_threshold_from_hidden(layer: LayerWeights, hidden: np.ndarray,
                                 cett_target: float,
                                 definition: str = "down_weighted",
                                 constraint: str = "mean",
                                 rel_tol: float = 1e-3, max_iter: int = 60) -> float:
    """search_threshold over already-computed gated hidden vectors (T, d_ff)."""
    if hidden.ndim != 2 or hidden.shape[0] == 0:
        raise ContractViolation("hidden must be a non-empty (T, d_ff) batch")
    curves = [_TailCurve(layer, h, definition) for h in hidden]
    return _search_over_curves(curves, cett_target, constraint, rel_tol, max_iter)


# ---------------------------------------------------------------------------
# Threshold profile


@dataclass
class ThresholdProfile:
    """Per-layer epsilon values plus the calibration settings that made them.

    cett_target is None for operating-point profiles that were not produced
    by the CETT search (e.g. fixed-sparsity benchmarking profiles).
    """

    cett_target: float | None
    per_layer_epsilon: list[float]
    magnitude_def: str = "down_weighted"
    aggregation: str = "flocking"
    calibration: dict = field(default_factory=lambda: {"n_tokens": 0, "dataset_tag": ""})

    def __post_init__(self):
        if self.cett_target is not None and not (0.0 < self.cett_target < 1.0):
            raise ContractViolation("cett_target must be in (0, 1)")
        if any(e < 0 for e in self.per_layer_epsilon):
            raise ContractViolation("per-layer epsilon values must be >= 0")
        if self.magnitude_def not in MAGNITUDE_DEFS:
            raise ContractViolation(f"unknown magnitude definition {self.magnitude_def!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ContractViolation(f"unknown aggregation {self.aggregation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.per_layer_epsilon)

    def to_json(self) -> str:
        doc = {
            "cett_target": self.cett_target,
            "per_layer_epsilon": [float(e) for e in self.per_layer_epsilon],
            "magnitude_def": self.magnitude_def,
            "aggregation": self.aggregation,
            "calibration": {
                "n_tokens": int(self.calibration.get("n_tokens", 0)),
                "dataset_tag": str(self.calibration.get("dataset_tag", "")),
            },
        }
        return json.dumps(doc, indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "ThresholdProfile":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise LoadError(f"profile is not valid JSON: {exc}") from exc
        try:
            return cls(
                cett_target=raw["cett_target"],
                per_layer_epsilon=list(raw["per_layer_epsilon"]),
                magnitude_def=raw.get("magnitude_def", "down_weighted"),
                aggregation=raw.get("aggregation", "flocking"),
                calibration=dict(raw.get("calibration", {})),
            )
        except (KeyError, TypeError) as exc:
            raise LoadError(f"malformed profile: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ThresholdProfile":
        p = Path(path)
        if not p.exists():
            raise LoadError(f"profile file not found: {p}")
        return cls.from_json(p.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Masks


class LayerMaskSet:
    """Per-layer boolean neuron masks, frozen once built."""

    def __init__(self, masks: list[np.ndarray]):
        frozen = []
        for m in masks:
            arr = np.asarray(m, dtype=bool).copy()
            arr.setflags(write=False)
            frozen.append(arr)
        self.masks = tuple(frozen)

    def __len__(self) -> int:
        return len(self.masks)

    def __getitem__(self, i) -> np.ndarray:
        return self.masks[i]

    def active_counts(self) -> list[int]:
        return [int(m.sum()) for m in self.masks]

    def active_fractions(self) -> list[float]:
        return [int(m.sum()) / m.size for m in self.masks]

    def __eq__(self, other) -> bool:
        if not isinstance(other, LayerMaskSet) or len(other) != len(self):
            return NotImplemented if not isinstance(other, LayerMaskSet) else False
        return all(np.array_equal(a, b) for a, b in zip(self.masks, other.masks))

    def to_hex_text(self) -> str:
        """Compact diffable dump: one 'layer d_ff hexbits' line per layer."""
        lines = []
        for i, m in enumerate(self.masks):
            lines.append(f"{i} {m.size} {np.packbits(m).tobytes().hex()}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_hex_text(cls, text: str) -> "LayerMaskSet":
        masks = []
        for line in text.splitlines():
            if not line.strip():
                continue
            _, size, hexbits = line.split()
            bits = np.unpackbits(np.frombuffer(bytes.fromhex(hexbits), dtype=np.uint8))
            masks.append(bits[: int(size)].astype(bool))
        return cls(masks)


def aggregate_prompt_scores(h_tokens: np.ndarray, layer: LayerWeights,
                            definition: str = "down_weighted",
                            aggregation: str = "flocking"):
    """Collapse per-token magnitudes (T, d_ff) into one per-neuron score.

    flocking: s_i = sum_t (m_{t,i} / ||m_t||_2)^2, scale-free per token and
    rewarding neurons that fire consistently. plain_l2: s_i = sum_t m_{t,i}^2.
    Tokens with all-zero magnitudes carry no signal and are skipped.

    Returns (s, mean_token_norm, n_effective_tokens).
    """
    if aggregation not in AGGREGATIONS:
        raise ContractViolation(f"unknown aggregation {aggregation!r}")
    m = magnitudes_from_hidden(layer, h_tokens, definition).astype(np.float64)
    norms = np.linalg.norm(m, axis=1)
    nz = norms > 0
    t_eff = int(nz.sum())
    if t_eff == 0:
        return np.zeros(m.shape[1]), 0.0, 0
    m = m[nz]
    norms = norms[nz]
    if aggregation == "flocking":
        s = np.sum(np.square(m / norms[:, None]), axis=0)
    else:
        s = np.sum(np.square(m), axis=0)
    return s, float(norms.mean()), t_eff


def _epsilon_to_score_cut(eps: float, mean_norm: float, t_eff: int,
                          aggregation: str) -> float:
    """Aggregate-score threshold a per-token magnitude threshold implies.

    A neuron sitting exactly at eps on every token (tokens at the mean
    magnitude norm) scores t_eff * (eps / mean_norm)^2 under flocking and
    t_eff * eps^2 under plain_l2; neurons at or above the implied score
    survive. This makes a one-token prompt's mask equal TT's keep-set for
    that token, and leaves masks invariant under prompt repetition.
    """
    if aggregation == "flocking":
        return t_eff * (eps / mean_norm) ** 2
    return t_eff * eps**2


def build_tda_masks(trace: PrefillTrace, profile: ThresholdProfile,
                    weights: ModelWeights) -> LayerMaskSet:
    """Per-layer masks from prompt activations vs the calibrated thresholds.

    Aggregates each layer's per-token magnitudes into relative scores and
    keeps neurons at or above the threshold the layer's epsilon implies.
    A layer whose prompt activations are all zero keeps every neuron
    (fail-safe toward dense).
    """
    if trace.n_tokens < 1:
        raise ContractViolation("trace must cover at least one prompt token")
    if profile.n_layers != weights.config.n_layers:
        raise ContractViolation(
            f"profile has {profile.n_layers} epsilons, model has "
            f"{weights.config.n_layers} layers"
        )
    masks = []
    for li, layer in enumerate(weights.layers):
        s, mean_norm, t_eff = aggregate_prompt_scores(
            trace.hidden[li], layer, profile.magnitude_def, profile.aggregation
        )
        if t_eff == 0:
            masks.append(np.ones(weights.config.d_ff, dtype=bool))
            continue
        cut = _epsilon_to_score_cut(
            float(profile.per_layer_epsilon[li]), mean_norm, t_eff, profile.aggregation
        )
        masks.append(s >= cut)
    return LayerMaskSet(masks)


def build_griffin_masks(trace: PrefillTrace, sparsity: float, weights: ModelWeights,
                        definition: str = "down_weighted",
                        aggregation: str = "flocking") -> LayerMaskSet:
    """Fixed top-k masks: per layer keep the ceil((1-sparsity)*d_ff) neurons
    with the highest aggregate score; ties go to the lower index."""
    if not (0.0 < sparsity < 1.0):
        raise ContractViolation("sparsity must be in (0, 1)")
    if trace.n_tokens < 1:
        raise ContractViolation("trace must cover at least one prompt token")
    d_ff = weights.config.d_ff
    keep = math.ceil((1.0 - sparsity) * d_ff)
    masks = []
    for li, layer in enumerate(weights.layers):
        s, _, _ = aggregate_prompt_scores(
            trace.hidden[li], layer, definition, aggregation
        )
        order = np.argsort(-s, kind="stable")
        mask = np.zeros(d_ff, dtype=bool)
        mask[order[:keep]] = True
        masks.append(mask)
    return LayerMaskSet(masks)


def profile_for_active_fraction(trace: PrefillTrace, weights: ModelWeights,
                                active_fraction: float,
                                definition: str = "down_weighted",
                                aggregation: str = "flocking") -> ThresholdProfile:
    """Operating-point profile: per-layer epsilons that make build_tda_masks
    keep about the requested neuron fraction on this prompt.

    Used to pin TDA at a fixed sparsity for like-for-like benchmarking; not a
    CETT calibration, so cett_target is None.
    """
    if not (0.0 < active_fraction <= 1.0):
        raise ContractViolation("active_fraction must be in (0, 1]")
    d_ff = weights.config.d_ff
    keep = max(1, math.ceil(active_fraction * d_ff))
    eps = []
    for li, layer in enumerate(weights.layers):
        s, mean_norm, t_eff = aggregate_prompt_scores(
            trace.hidden[li], layer, definition, aggregation
        )
        if t_eff == 0:
            eps.append(0.0)
            continue
        s_cut = float(np.partition(s, -keep)[-keep])
        if aggregation == "flocking":
            eps.append(mean_norm * math.sqrt(s_cut / t_eff))
        else:
            eps.append(math.sqrt(s_cut / t_eff))
    return ThresholdProfile(
        cett_target=None,
        per_layer_epsilon=eps,
        magnitude_def=definition,
        aggregation=aggregation,
        calibration={
            "n_tokens": trace.n_tokens,
            "dataset_tag": f"active_fraction={active_fraction}",
        },
    )


def sparsity_report(masks: LayerMaskSet) -> dict:
    """Active fraction per layer and its mean."""
    fractions = masks.active_fractions()
    return {
        "per_layer_active_fraction": fractions,
        "mean_active_fraction": float(np.mean(fractions)) if fractions else 1.0,
    }


# ---------------------------------------------------------------------------
# Sparse FFN kernels


def _tt_forward(layer: LayerWeights, x: np.ndarray, epsilon: float, kind: str,
                definition: str):
    """TT kernel returning (output, active_count)."""
    h = gated_hidden(layer, x, kind)
    m = magnitudes_from_hidden(layer, h, definition)
    keep = m >= epsilon
    count = int(keep.sum())
    if count == h.size:
        return layer.ffn_down @ h, count
    if count == 0:
        return np.zeros(layer.ffn_down.shape[0], dtype=F32), 0
    idx = np.flatnonzero(keep)
    return layer.ffn_down[:, idx] @ h[idx], count


def tt_ffn_forward(layer: LayerWeights, x: np.ndarray, epsilon: float, kind: str,
                   definition: str = "down_weighted") -> np.ndarray:
    """Per-token threshold truncation: full gate/up and magnitudes, sliced
    down projection over the surviving neurons.

    Equals the dense output minus the summed contributions of the dropped
    neurons; with epsilon 0 it is the dense kernel bit for bit.
    """
    out, _ = _tt_forward(layer, x, epsilon, kind, definition)
    return out


class _SlicedLayer:
    """Row/column slices of one layer's FFN weights for a fixed mask."""

    __slots__ = ("gate", "up", "down", "count")

    def __init__(self, layer: LayerWeights, idx: np.ndarray):
        self.gate = np.ascontiguousarray(layer.ffn_gate[idx])
        self.up = np.ascontiguousarray(layer.ffn_up[idx])
        self.down = np.ascontiguousarray(layer.ffn_down[:, idx])
        self.count = int(idx.size)


def tda_ffn_forward(layer: LayerWeights, x: np.ndarray, mask: np.ndarray,
                    kind: str) -> np.ndarray:
    """Sliced FFN: gate/up/down computed only over active neurons.

    Inactive rows of the gate/up projections and columns of the down
    projection are skipped outright, not zeroed; there is no per-token
    magnitude computation. A full mask falls through to the dense kernel, an
    empty mask returns the zero vector.
    """
    if mask.size != layer.ffn_gate.shape[0]:
        raise ContractViolation(
            f"mask length {mask.size} != d_ff {layer.ffn_gate.shape[0]}"
        )
    if mask.all():
        return dense_ffn(layer, x, kind)
    if not mask.any():
        return np.zeros(layer.ffn_down.shape[0], dtype=F32)
    sliced = _SlicedLayer(layer, np.flatnonzero(mask))
    return _sliced_forward(sliced, x, kind)


def _sliced_forward(sliced: _SlicedLayer, x: np.ndarray, kind: str) -> np.ndarray:
    h = activation(kind, sliced.gate @ x) * (sliced.up @ x)
    return sliced.down @ h


# ---------------------------------------------------------------------------
# Strategies


class FfnStrategy:
    """Common interface the generation loop drives.

    prepare() runs once after prefill (mask construction for the sequence-
    level strategies); ffn() serves every generation-phase FFN call;
    counters record actual multiply-adds, not estimates.
    """

    name = "base"
    requires_profile = False

    def __init__(self):
        self.ffn_macs = 0
        self.ffn_calls = 0
        self._kind = None
        self._d_model = None
        self._d_ff = None

    def reset_counters(self):
        self.ffn_macs = 0
        self.ffn_calls = 0

    def prepare(self, weights: ModelWeights, trace: PrefillTrace):
        self._kind = weights.config.activation_kind
        self._d_model = weights.config.d_model
        self._d_ff = weights.config.d_ff

    def on_step_start(self, step_index: int):
        pass

    def ffn(self, layer_idx: int, layer: LayerWeights, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def mean_active_fraction(self) -> float:
        return 1.0

    def per_layer_active_fraction(self):
        return None

    def stats(self) -> dict:
        return {
            "strategy": self.name,
            "ffn_macs": int(self.ffn_macs),
            "ffn_calls": int(self.ffn_calls),
            "mean_active_fraction": self.mean_active_fraction(),
            "per_layer_active_fraction": self.per_layer_active_fraction(),
        }


class DenseStrategy(FfnStrategy):
    name = "dense"

    def ffn(self, layer_idx, layer, x):
        self.ffn_calls += 1
        self.ffn_macs += 3 * self._d_model * self._d_ff
        return dense_ffn(layer, x, self._kind)


class TtStrategy(FfnStrategy):
    """Threshold truncation: per-token masking against the profile epsilons."""

    name = "tt"
    requires_profile = True

    def __init__(self, profile: ThresholdProfile):
        super().__init__()
        self.profile = profile
        self._active_total = 0

    def reset_counters(self):
        super().reset_counters()
        self._active_total = 0

    def prepare(self, weights, trace):
        super().prepare(weights, trace)
        if self.profile.n_layers != weights.config.n_layers:
            raise ContractViolation(
                f"profile has {self.profile.n_layers} epsilons, model has "
                f"{weights.config.n_layers} layers"
            )

    def ffn(self, layer_idx, layer, x):
        out, count = _tt_forward(
            layer, x, float(self.profile.per_layer_epsilon[layer_idx]),
            self._kind, self.profile.magnitude_def,
        )
        self.ffn_calls += 1
        # gate and up are always full; only the down projection is sliced
        self.ffn_macs += 2 * self._d_model * self._d_ff + self._d_model * count
        self._active_total += count
        return out

    def mean_active_fraction(self):
        if self.ffn_calls == 0:
            return 1.0
        return self._active_total / (self.ffn_calls * self._d_ff)


class _MaskedStrategy(FfnStrategy):
    """Shared machinery for the sequence-level (mask-reusing) strategies."""

    def __init__(self):
        super().__init__()
        self.masks: LayerMaskSet | None = None
        self._sliced: list = []

    def _build_masks(self, weights, trace) -> LayerMaskSet:
        raise NotImplementedError

    def prepare(self, weights, trace):
        super().prepare(weights, trace)
        self.masks = self._build_masks(weights, trace)
        self._rebuild_sliced(weights)

    def _rebuild_sliced(self, weights):
        self._sliced = []
        for li, layer in enumerate(weights.layers):
            mask = self.masks[li]
            if mask.all():
                self._sliced.append("dense")
            elif not mask.any():
                self._sliced.append("zero")
            else:
                self._sliced.append(_SlicedLayer(layer, np.flatnonzero(mask)))

    def ffn(self, layer_idx, layer, x):
        self.ffn_calls += 1
        sl = self._sliced[layer_idx]
        if sl == "dense":
            self.ffn_macs += 3 * self._d_model * self._d_ff
            return dense_ffn(layer, x, self._kind)
        if sl == "zero":
            return np.zeros(self._d_model, dtype=F32)
        self.ffn_macs += 3 * self._d_model * sl.count
        return _sliced_forward(sl, x, self._kind)

    def mean_active_fraction(self):
        if self.masks is None:
            return 1.0
        return float(np.mean(self.masks.active_fractions()))

    def per_layer_active_fraction(self):
        return None if self.masks is None else self.masks.active_fractions()


class GriffinStrategy(_MaskedStrategy):
    """Fixed top-k per layer from prompt statistics."""

    name = "griffin"

    def __init__(self, sparsity: float, definition: str = "down_weighted",
                 aggregation: str = "flocking"):
        super().__init__()
        if not (0.0 < sparsity < 1.0):
            raise ContractViolation("sparsity must be in (0, 1)")
        self.sparsity = sparsity
        self.definition = definition
        self.aggregation = aggregation

    def _build_masks(self, weights, trace):
        return build_griffin_masks(
            trace, self.sparsity, weights, self.definition, self.aggregation
        )


class TdaStrategy(_MaskedStrategy):
    """Threshold-based dynamic activation: thresholded prompt masks reused
    for the whole generation.

    refresh_interval 0 means the masks never change (the default contract);
    k > 0 makes every k-th step run dense, record its gated activations and
    rebuild the masks from them.
    """

    name = "tda"
    requires_profile = True

    def __init__(self, profile: ThresholdProfile, refresh_interval: int = 0):
        super().__init__()
        if refresh_interval < 0:
            raise ContractViolation("refresh_interval must be >= 0")
        self.profile = profile
        self.refresh_interval = refresh_interval
        self._weights = None
        self._probe_step = False
        self._probe_hidden: list[np.ndarray] = []

    def _build_masks(self, weights, trace):
        self._weights = weights
        return build_tda_masks(trace, self.profile, weights)

    def on_step_start(self, step_index):
        self._probe_step = (
            self.refresh_interval > 0
            and step_index > 0
            and step_index % self.refresh_interval == 0
        )
        if self._probe_step:
            self._probe_hidden = []

    def ffn(self, layer_idx, layer, x):
        if not self._probe_step:
            return super().ffn(layer_idx, layer, x)
        self.ffn_calls += 1
        self.ffn_macs += 3 * self._d_model * self._d_ff
        h = gated_hidden(layer, x, self._kind)
        self._probe_hidden.append(h)
        if len(self._probe_hidden) == len(self._weights.layers):
            trace = PrefillTrace(
                hidden=[hh[None, :] for hh in self._probe_hidden], ffn_inputs=[]
            )
            self.masks = build_tda_masks(trace, self.profile, self._weights)
            self._rebuild_sliced(self._weights)
        return layer.ffn_down @ h


def make_strategy(name: str, profile: ThresholdProfile | None = None,
                  sparsity: float | None = None,
                  refresh_interval: int = 0) -> FfnStrategy:
    """Construct a strategy from its CLI-facing name."""
    if name == "dense":
        return DenseStrategy()
    if name == "tt":
        if profile is None:
            raise ContractViolation("tt strategy requires a threshold profile")
        return TtStrategy(profile)
    if name == "griffin":
        if sparsity is None:
            raise ContractViolation("griffin strategy requires a sparsity fraction")
        return GriffinStrategy(sparsity)
    if name == "tda":
        if profile is None:
            raise ContractViolation("tda strategy requires a threshold profile")
        return TdaStrategy(profile, refresh_interval=refresh_interval)
    raise ContractViolation(f"unknown strategy {name!r}")
