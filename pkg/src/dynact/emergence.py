"""Sparsity-emergence probe: a one-hidden-layer classifier trained with
explicit analytic gradients (no autodiff), tracking how positive activations
shrink during training.

Two variants share the same pre-activation a = x @ theta:

  relu:   hidden = max(a, 0)
  swiglu: hidden = swish1(a) * (x @ tau),  swish1(a) = a * sigmoid(a)

The output layer V is drawn zero-mean and stays frozen by default: the
magnitude-reduction effect under study is an expectation over a fixed random
zero-mean last layer, and training V drifts it off that regime (a
train_last_layer flag enables the ablation). The trajectory records the mean
positive pre-activation magnitude and the fraction of near-zero hidden
activations on a held-out batch; the direction of interest is the relu
variant driving more activations to (near) zero than swiglu does.

Runs in float64: the finite-difference gradient checks want the headroom,
and these toy trainers never touch the f32 inference kernels.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, DivergenceError

VARIANTS = ("relu", "swiglu")


@dataclass(frozen=True)
class EmergenceConfig:
    d_in: int = 16
    d_hidden: int = 64
    classes: int = 3
    steps: int = 2000
    lr: float = 0.05
    seed: int = 0
    batch_size: int = 32
    record_every: int = 100
    heldout_size: int = 256
    train_size: int = 4096
    cluster_spread: float = 2.0
    near_zero_threshold: float = 1e-3
    train_last_layer: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ContractViolation("steps must be >= 0")
        if self.classes < 2 or self.d_in < 1 or self.d_hidden < 1:
            raise ContractViolation("degenerate network dimensions")
        if self.batch_size < 1 or self.record_every < 1:
            raise ContractViolation("batch_size and record_every must be >= 1")


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class ToyNetwork:
    """f(x) = V sigma(first layer); parameters theta (+ tau for swiglu), V."""

    def __init__(self, d_in: int, d_hidden: int, classes: int, variant: str,
                 rng: np.random.Generator):
        if variant not in VARIANTS:
            raise ContractViolation(f"unknown variant {variant!r}")
        self.variant = variant
        self.theta = rng.standard_normal((d_in, d_hidden)) / np.sqrt(d_in)
        self.tau = (
            rng.standard_normal((d_in, d_hidden)) / np.sqrt(d_in)
            if variant == "swiglu" else None
        )
        # zero-mean distribution for the output layer
        self.v = rng.standard_normal((classes, d_hidden)) / np.sqrt(d_hidden)

    def params(self) -> dict[str, np.ndarray]:
        p = {"theta": self.theta, "v": self.v}
        if self.tau is not None:
            p["tau"] = self.tau
        return p

    def hidden(self, x: np.ndarray):
        """Returns (hidden activations, cache for backprop)."""
        a = x @ self.theta
        if self.variant == "relu":
            return np.maximum(a, 0.0), {"a": a}
        b = x @ self.tau
        sig = _sigmoid(a)
        swish = a * sig
        return swish * b, {"a": a, "b": b, "sig": sig, "swish": swish}

    def logits(self, x: np.ndarray) -> np.ndarray:
        h, _ = self.hidden(x)
        return h @ self.v.T

    def loss(self, x: np.ndarray, y: np.ndarray) -> float:
        z = self.logits(x)
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
        return float(-np.mean(logp[np.arange(len(y)), y]))

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray):
        """Cross-entropy loss and closed-form gradients for all parameters."""
        n = len(y)
        h, cache = self.hidden(x)
        z = h @ self.v.T
        z = z - z.max(axis=1, keepdims=True)
        expz = np.exp(z)
        probs = expz / expz.sum(axis=1, keepdims=True)
        with np.errstate(divide="ignore"):  # p=0 -> inf loss -> divergence
            logp = np.log(probs[np.arange(n), y])
        loss = float(-np.mean(logp))

        g = probs.copy()
        g[np.arange(n), y] -= 1.0
        g /= n  # (n, classes)
        grads = {"v": g.T @ h}
        dh = g @ self.v  # (n, d_hidden)
        a = cache["a"]
        if self.variant == "relu":
            grads["theta"] = x.T @ (dh * (a > 0))
        else:
            sig, swish, b = cache["sig"], cache["swish"], cache["b"]
            dswish = sig * (1.0 + a * (1.0 - sig))
            grads["theta"] = x.T @ (dh * dswish * b)
            grads["tau"] = x.T @ (dh * swish)
        return loss, grads

    def apply_grads(self, grads: dict[str, np.ndarray], lr: float,
                    train_last_layer: bool = False):
        self.theta -= lr * grads["theta"]
        if self.tau is not None and "tau" in grads:
            self.tau -= lr * grads["tau"]
        if train_last_layer:
            self.v -= lr * grads["v"]


def make_dataset(rng: np.random.Generator, n: int, d_in: int, classes: int,
                 spread: float = 2.0, means: np.ndarray | None = None):
    """Gaussian class clusters; pass `means` to sample more data from the
    same clusters."""
    if means is None:
        means = rng.standard_normal((classes, d_in)) * spread
    y = rng.integers(0, classes, size=n)
    x = means[y] + rng.standard_normal((n, d_in))
    return x, y, means


@dataclass
class TrajectoryPoint:
    step: int
    mean_pos_magnitude: float
    near_zero_fraction: float


@dataclass
class SparsityTrajectory:
    variant: str
    points: list[TrajectoryPoint] = field(default_factory=list)
    final_loss: float = float("nan")

    @property
    def init_near_zero_fraction(self) -> float:
        return self.points[0].near_zero_fraction

    @property
    def final_near_zero_fraction(self) -> float:
        return self.points[-1].near_zero_fraction

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["step", "mean_pos_magnitude", "near_zero_fraction"])
        for p in self.points:
            w.writerow([p.step, repr(p.mean_pos_magnitude), repr(p.near_zero_fraction)])
        return out.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def _measure(net: ToyNetwork, x: np.ndarray, threshold: float):
    a = x @ net.theta
    pos = a > 0
    mean_pos = float(a[pos].mean()) if pos.any() else 0.0
    h, _ = net.hidden(x)
    near_zero = float(np.mean(np.abs(h) < threshold))
    return mean_pos, near_zero


def run_emergence(config: EmergenceConfig, variant: str) -> SparsityTrajectory:
    """Train the toy network by plain SGD and record the sparsity trajectory.

    Deterministic from the seed: the dataset, initialization and batch order
    each use their own seeded stream, so both variants see identical data.
    Raises DivergenceError (with the step index) if the loss goes non-finite.
    """
    if variant not in VARIANTS:
        raise ContractViolation(f"unknown variant {variant!r}")
    data_rng = np.random.default_rng([config.seed, 0])
    init_rng = np.random.default_rng([config.seed, 1, VARIANTS.index(variant)])
    batch_rng = np.random.default_rng([config.seed, 2])

    x_train, y_train, means = make_dataset(
        data_rng, config.train_size, config.d_in, config.classes, config.cluster_spread
    )
    x_held, _, _ = make_dataset(
        data_rng, config.heldout_size, config.d_in, config.classes,
        config.cluster_spread, means=means,
    )
    net = ToyNetwork(config.d_in, config.d_hidden, config.classes, variant, init_rng)

    traj = SparsityTrajectory(variant=variant)
    mean_pos, near_zero = _measure(net, x_held, config.near_zero_threshold)
    traj.points.append(TrajectoryPoint(0, mean_pos, near_zero))

    loss = float("nan")
    for step in range(1, config.steps + 1):
        idx = batch_rng.integers(0, config.train_size, size=config.batch_size)
        loss, grads = net.loss_and_grads(x_train[idx], y_train[idx])
        if not np.isfinite(loss):
            raise DivergenceError(step)
        net.apply_grads(grads, config.lr, config.train_last_layer)
        if step % config.record_every == 0 or step == config.steps:
            mean_pos, near_zero = _measure(net, x_held, config.near_zero_threshold)
            traj.points.append(TrajectoryPoint(step, mean_pos, near_zero))

    traj.final_loss = loss if config.steps > 0 else net.loss(x_train, y_train)
    return traj
