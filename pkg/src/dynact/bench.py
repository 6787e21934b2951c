"""Generation-phase latency / FLOP / fidelity comparison across strategies.

Timed runs measure only the autoregressive generation loop (prefill, weight
load and tokenization are excluded), pinned to a single BLAS thread so
strategies are comparable. FLOP numbers come from the strategies' own
multiply-add counters, not estimates. Wall-clock medians are the headline
statistic; a run whose stddev/median exceeds 0.25 is flagged noisy, not
failed.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ContractViolation, LoadError
from .model import (
    GenerationRequest,
    ModelConfig,
    ModelWeights,
    decode_step,
    dense_ffn,
    generate,
    prefill,
)
from .sparsity import (
    FfnStrategy,
    ThresholdProfile,
    make_strategy,
    profile_for_active_fraction,
    search_threshold_from_hidden,
)
from .tokenizer import BOS_ID
from .weights_io import load_weights

STRATEGY_NAMES = ("dense", "tt", "griffin", "tda")


@dataclass
class BenchSpec:
    model_path: str
    config_path: str | None = None  # defaults to model_path + ".json"
    prompt_len: int = 128
    new_tokens: int = 128
    strategies: list[str] = field(default_factory=lambda: list(STRATEGY_NAMES))
    repetitions: int = 5
    warmup: int = 1
    seed: int = 0
    sparsity: float = 0.5  # griffin / tda operating point
    profile_path: str | None = None  # use this profile for tt (and tda) instead
    cett_target: float = 0.2  # tt calibration target when no profile is given

    def __post_init__(self):
        if self.repetitions < 3:
            raise ContractViolation("repetitions must be >= 3 for timing entries")
        if self.warmup < 0:
            raise ContractViolation("warmup must be >= 0")
        if self.prompt_len < 1 or self.new_tokens < 1:
            raise ContractViolation("prompt_len and new_tokens must be >= 1")
        if not self.strategies:
            raise ContractViolation("at least one strategy required")
        for s in self.strategies:
            if s not in STRATEGY_NAMES:
                raise ContractViolation(f"unknown strategy {s!r}")
        if not (0.0 < self.sparsity < 1.0):
            raise ContractViolation("sparsity must be in (0, 1)")

    @classmethod
    def from_json(cls, text: str) -> "BenchSpec":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise LoadError(f"bench spec is not valid JSON: {exc}") from exc
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise LoadError(f"unknown bench spec fields: {sorted(unknown)}")
        return cls(**raw)


def bench_prompt(prompt_len: int, seed: int) -> list[int]:
    """Deterministic prompt: BOS plus random byte ids."""
    rng = np.random.default_rng([seed, 17])
    return [BOS_ID] + [int(t) for t in rng.integers(0, 256, size=prompt_len - 1)]


# ---------------------------------------------------------------------------
# Fidelity probe


class _FfnErrorRecorder:
    """Wraps a strategy; per call compares its FFN output against the dense
    kernel on the same input, so errors are attributable per step."""

    def __init__(self, inner: FfnStrategy):
        self.inner = inner
        self.step_errors: list[float] = []
        self._current: list[float] = []
        self._kind = None

    def prepare(self, weights, trace):
        self.inner.prepare(weights, trace)
        self._kind = weights.config.activation_kind

    def on_step_start(self, step_index):
        self._flush()
        self.inner.on_step_start(step_index)

    def _flush(self):
        if self._current:
            self.step_errors.append(float(np.mean(self._current)))
            self._current = []

    def ffn(self, layer_idx, layer, x):
        out = self.inner.ffn(layer_idx, layer, x)
        ref = dense_ffn(layer, x, self._kind)
        denom = float(np.linalg.norm(ref.astype(np.float64)))
        if denom == 0.0:
            err = 0.0 if float(np.linalg.norm(out)) == 0.0 else float("inf")
        else:
            err = float(np.linalg.norm((out - ref).astype(np.float64)) / denom)
        self._current.append(err)
        return out

    def stats(self):
        return self.inner.stats()


def _drive(weights: ModelWeights, prompt_ids: list[int], strategy, steps: int,
           forced_tokens: list[int] | None = None):
    """Run `steps` greedy decode steps; returns (per-step logits, own argmax
    choices). With forced_tokens the model consumes those instead of its own
    choices (teacher forcing)."""
    cache, logits, trace = prefill(weights, prompt_ids)
    strategy.prepare(weights, trace)
    logits_seq: list[np.ndarray] = []
    choices: list[int] = []
    for i in range(steps):
        logits_seq.append(logits)
        own = int(np.argmax(logits))
        choices.append(own)
        fed = own if forced_tokens is None else forced_tokens[i]
        strategy.on_step_start(i)
        logits = decode_step(weights, cache, fed, strategy.ffn)
    return logits_seq, choices


def fidelity_probe(weights: ModelWeights, prompt_ids: list[int],
                   strategy_a, strategy_b, steps: int) -> dict:
    """Lockstep comparison teacher-forced by strategy A's greedy choices.

    Per step: the max-abs gap between the two strategies' logits, B's FFN
    output error relative to the dense kernel on B's own inputs, and whether
    B's argmax agrees with the token A took.
    """
    if len(prompt_ids) + steps > weights.config.max_seq_len:
        raise ContractViolation("probe exceeds max_seq_len")
    logits_a, tokens_a = _drive(weights, prompt_ids, strategy_a, steps)
    recorder = _FfnErrorRecorder(strategy_b)
    logits_b, choices_b = _drive(weights, prompt_ids, recorder, steps,
                                 forced_tokens=tokens_a)
    recorder._flush()
    gaps = [
        float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64))))
        for a, b in zip(logits_a, logits_b)
    ]
    agreement = (
        float(np.mean([c == t for c, t in zip(choices_b, tokens_a)])) if steps else 1.0
    )
    errors = recorder.step_errors
    return {
        "per_step_max_logit_gap": gaps,
        "max_logit_gap": max(gaps) if gaps else 0.0,
        "token_agreement": agreement,
        "per_step_ffn_rel_error": errors,
        "mean_ffn_rel_error": float(np.mean(errors)) if errors else 0.0,
    }


# ---------------------------------------------------------------------------
# Benchmark


@dataclass
class StrategyResult:
    strategy: str
    median_seconds: float
    mean_seconds: float
    stddev_seconds: float
    speedup_vs_dense: float | None
    reduction_vs_dense: float | None
    ffn_macs: int
    mean_active_fraction: float
    token_agreement_vs_dense: float
    mean_step_ffn_rel_error: float
    max_logit_gap: float
    noisy: bool

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "median_seconds": self.median_seconds,
            "mean_seconds": self.mean_seconds,
            "stddev_seconds": self.stddev_seconds,
            "speedup_vs_dense": self.speedup_vs_dense,
            "reduction_vs_dense": self.reduction_vs_dense,
            "ffn_macs": self.ffn_macs,
            "mean_active_fraction": self.mean_active_fraction,
            "token_agreement_vs_dense": self.token_agreement_vs_dense,
            "mean_step_ffn_rel_error": self.mean_step_ffn_rel_error,
            "max_logit_gap": self.max_logit_gap,
            "noisy": self.noisy,
        }


@dataclass
class BenchReport:
    model_label: str
    prompt_len: int
    new_tokens: int
    repetitions: int
    seed: int
    sparsity: float
    results: list[StrategyResult]
    noisy: bool

    def to_dict(self) -> dict:
        return {
            "model": self.model_label,
            "prompt_len": self.prompt_len,
            "new_tokens": self.new_tokens,
            "repetitions": self.repetitions,
            "seed": self.seed,
            "sparsity": self.sparsity,
            "noisy": self.noisy,
            "strategies": [r.to_dict() for r in self.results],
        }


def _build_strategy(name: str, spec: BenchSpec, weights: ModelWeights,
                    trace) -> FfnStrategy:
    if name == "dense":
        return make_strategy("dense")
    if name == "griffin":
        return make_strategy("griffin", sparsity=spec.sparsity)
    if spec.profile_path is not None:
        profile = ThresholdProfile.load(spec.profile_path)
        return make_strategy(name, profile=profile)
    if name == "tt":
        eps = [
            search_threshold_from_hidden(layer, trace.hidden[li], spec.cett_target)
            for li, layer in enumerate(weights.layers)
        ]
        profile = ThresholdProfile(
            cett_target=spec.cett_target,
            per_layer_epsilon=eps,
            calibration={"n_tokens": trace.n_tokens, "dataset_tag": "bench-prompt"},
        )
        return make_strategy("tt", profile=profile)
    # tda: fixed-sparsity operating point on the bench prompt, so its cost
    # is comparable with griffin at the same active fraction
    profile = profile_for_active_fraction(trace, weights, 1.0 - spec.sparsity)
    return make_strategy("tda", profile=profile)


def run_bench(spec: BenchSpec, weights: ModelWeights | None = None) -> BenchReport:
    """Execute the benchmark: per strategy, warmup runs discarded, timed runs
    measure only the generation loop, identical prompt and seed across
    strategies."""
    if weights is None:
        config_path = spec.config_path or spec.model_path + ".json"
        config = ModelConfig.load(config_path)
        weights = load_weights(spec.model_path, config)
    cfg = weights.config
    if spec.prompt_len + spec.new_tokens > cfg.max_seq_len:
        raise ContractViolation(
            f"prompt {spec.prompt_len} + new {spec.new_tokens} exceeds "
            f"max_seq_len {cfg.max_seq_len}"
        )
    prompt = bench_prompt(spec.prompt_len, spec.seed)

    # calibration trace, shared by every strategy that needs prompt statistics
    _, _, trace = prefill(weights, prompt)

    # dense reference tokens for agreement (untimed)
    dense_ref = generate(
        weights, GenerationRequest(prompt, spec.new_tokens, make_strategy("dense"))
    ).new_tokens

    dense_median: float | None = None
    results: list[StrategyResult] = []
    for name in spec.strategies:
        strategy = _build_strategy(name, spec, weights, trace)
        times: list[float] = []
        tokens: list[int] | None = None
        stats: dict = {}
        for rep in range(spec.warmup + spec.repetitions):
            strategy.reset_counters()
            request = GenerationRequest(prompt, spec.new_tokens, strategy)
            with threadpool_limits(limits=1):
                result = generate(weights, request)
            if rep < spec.warmup:
                continue
            times.append(result.generation_seconds)
            if tokens is None:
                tokens = result.new_tokens
                stats = result.strategy_stats
            elif tokens != result.new_tokens:
                raise ContractViolation(
                    f"strategy {name} produced non-deterministic tokens"
                )

        median = statistics.median(times)
        mean = statistics.fmean(times)
        stddev = statistics.pstdev(times)
        noisy = bool(median > 0 and stddev / median > 0.25)
        if name == "dense" and dense_median is None:
            dense_median = median

        # reuse the strategy instance: prepare() rebuilds its masks
        # deterministically and its counters are already harvested
        probe = fidelity_probe(
            weights, prompt, make_strategy("dense"), strategy, spec.new_tokens
        )
        agreement = float(np.mean([a == b for a, b in zip(tokens, dense_ref)]))

        results.append(StrategyResult(
            strategy=name,
            median_seconds=median,
            mean_seconds=mean,
            stddev_seconds=stddev,
            speedup_vs_dense=None,
            reduction_vs_dense=None,
            ffn_macs=int(stats["ffn_macs"]),
            mean_active_fraction=float(stats["mean_active_fraction"]),
            token_agreement_vs_dense=agreement,
            mean_step_ffn_rel_error=probe["mean_ffn_rel_error"],
            max_logit_gap=probe["max_logit_gap"],
            noisy=noisy,
        ))

    if dense_median is not None and dense_median > 0:
        for r in results:
            r.speedup_vs_dense = dense_median / r.median_seconds
            r.reduction_vs_dense = (dense_median - r.median_seconds) / dense_median

    return BenchReport(
        model_label=f"d{cfg.d_model}-ff{cfg.d_ff}-L{cfg.n_layers}",
        prompt_len=spec.prompt_len,
        new_tokens=spec.new_tokens,
        repetitions=spec.repetitions,
        seed=spec.seed,
        sparsity=spec.sparsity,
        results=results,
        noisy=any(r.noisy for r in results),
    )


# ---------------------------------------------------------------------------
# Report emission


def _fmt(v, spec_str: str) -> str:
    if v is None:
        return ""
    return format(v, spec_str)


def report_to_json(report: BenchReport) -> str:
    return json.dumps(report.to_dict(), indent=2) + "\n"


def report_to_csv(report: BenchReport) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow([
        "strategy", "median_seconds", "mean_seconds", "stddev_seconds",
        "reduction_vs_dense", "ffn_macs", "mean_active_fraction",
        "token_agreement_vs_dense", "mean_step_ffn_rel_error", "noisy",
    ])
    for r in report.results:
        w.writerow([
            r.strategy,
            _fmt(r.median_seconds, ".6f"),
            _fmt(r.mean_seconds, ".6f"),
            _fmt(r.stddev_seconds, ".6f"),
            _fmt(r.reduction_vs_dense, ".4f"),
            r.ffn_macs,
            _fmt(r.mean_active_fraction, ".6f"),
            _fmt(r.token_agreement_vs_dense, ".6f"),
            _fmt(r.mean_step_ffn_rel_error, ".3e"),
            int(r.noisy),
        ])
    return out.getvalue()


def report_to_markdown(report: BenchReport) -> str:
    """Latency-table layout: one strategy per column, percentage-reduction
    annotations against dense."""
    names = [r.strategy for r in report.results]
    cells = []
    for r in report.results:
        cell = f"{r.median_seconds:.4f}"
        if r.strategy != "dense" and r.reduction_vs_dense is not None:
            pct = 100.0 * r.reduction_vs_dense
            cell += f" ({pct:.1f}%↓)" if pct >= 0 else f" ({-pct:.1f}%↑)"
        cells.append(cell)
    lines = [
        f"Generation phase latency (s), median of {report.repetitions} repetitions, "
        f"prompt {report.prompt_len} + {report.new_tokens} new tokens"
        + (" [noisy]" if report.noisy else ""),
        "",
        "| Model | " + " | ".join(n.capitalize() for n in names) + " |",
        "|" + "---|" * (len(names) + 1),
        f"| {report.model_label} | " + " | ".join(cells) + " |",
    ]
    return "\n".join(lines) + "\n"


def emit_report(report: BenchReport, fmt: str, path=None) -> str:
    """Render the report; writes to path when given, always returns the text."""
    if fmt == "json":
        text = report_to_json(report)
    elif fmt == "csv":
        text = report_to_csv(report)
    elif fmt == "markdown_table":
        text = report_to_markdown(report)
    else:
        raise ContractViolation(f"unknown report format {fmt!r}")
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
