"""Dense numeric kernels every other module builds on.

Matrices are 2-D float32 ndarrays in row-major (C) order, vectors are 1-D
float32 ndarrays. Everything here is a pure function over immutable inputs;
no shared mutable state, safe under arbitrary concurrency.

Kept in 32-bit floats throughout. Calibration-side code that needs extra
precision (CETT, threshold search) upcasts locally; the forward paths used
for timing stay f32.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation

F32 = np.float32

ACTIVATION_KINDS = ("relu", "silu", "relu_squared")


def as_matrix(data) -> np.ndarray:
    """Coerce to a C-contiguous float32 2-D array."""
    m = np.ascontiguousarray(data, dtype=F32)
    if m.ndim != 2:
        raise ContractViolation(f"matrix must be 2-D, got ndim={m.ndim}")
    return m


def as_vector(data) -> np.ndarray:
    """Coerce to a C-contiguous float32 1-D array."""
    v = np.ascontiguousarray(data, dtype=F32)
    if v.ndim != 1:
        raise ContractViolation(f"vector must be 1-D, got ndim={v.ndim}")
    return v


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """out[i] = sum_j m[i, j] * v[j]."""
    if m.ndim != 2 or v.ndim != 1:
        raise ContractViolation(
            f"matvec expects (matrix, vector), got ndim ({m.ndim}, {v.ndim})"
        )
    if m.shape[1] != v.shape[0]:
        raise ContractViolation(
            f"matvec dimension mismatch: matrix cols {m.shape[1]} != vector len {v.shape[0]}"
        )
    return m @ v


def l2_norm(v: np.ndarray) -> float:
    """Euclidean norm. Empty vectors are forbidden."""
    if v.size < 1:
        raise ContractViolation("l2_norm of an empty vector")
    return float(np.linalg.norm(v))


def activation(kind: str, v: np.ndarray) -> np.ndarray:
    """Elementwise activation: relu, silu (x*sigmoid(x)) or relu_squared."""
    if kind == "relu":
        return np.maximum(v, F32(0.0))
    if kind == "silu":
        # sigmoid via exp of the negative magnitude keeps f32 overflow away
        out = np.empty_like(v)
        neg = v < 0
        pos = ~neg
        ev = np.exp(-v[pos])
        out[pos] = v[pos] / (F32(1.0) + ev)
        ev = np.exp(v[neg])
        out[neg] = v[neg] * ev / (F32(1.0) + ev)
        return out
    if kind == "relu_squared":
        r = np.maximum(v, F32(0.0))
        return r * r
    raise ContractViolation(f"unknown activation kind {kind!r}")


def rms_norm(v: np.ndarray, gain: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """gain[i] * v[i] / sqrt(mean(v^2) + eps)."""
    if v.shape != gain.shape:
        raise ContractViolation(
            f"rms_norm length mismatch: {v.shape} vs gain {gain.shape}"
        )
    if eps <= 0:
        raise ContractViolation("rms_norm eps must be positive")
    ms = np.mean(np.square(v, dtype=F32))
    return (gain * v) / np.sqrt(ms + F32(eps))


def rms_norm_rows(x: np.ndarray, gain: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Row-wise rms_norm for a (T, d) batch."""
    ms = np.mean(np.square(x, dtype=F32), axis=1, keepdims=True)
    return (x * gain) / np.sqrt(ms + F32(eps))


def softmax(v: np.ndarray) -> np.ndarray:
    """Stable softmax with max subtraction."""
    if v.size < 1:
        raise ContractViolation("softmax of an empty vector")
    shifted = v - np.max(v)
    e = np.exp(shifted)
    return e / np.sum(e)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax along the last axis."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)
