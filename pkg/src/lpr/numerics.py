"""Dense numerics shared by every other module.

Everything here works on float64 numpy arrays in row-major (C) order. Random
streams come from :class:`numpy.random.Generator` backed by PCG64, whose
output is specified bit-for-bit across platforms for a given seed.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

RMS_EPS = 1e-6
FD_STEP = 1e-5


class ShapeError(ValueError):
    """Raised when array shapes do not conform."""


class OracleError(RuntimeError):
    """Raised when the finite-difference oracle sees a non-finite value."""


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(s: np.ndarray) -> np.ndarray:
    """Row-wise softmax with the row max subtracted first (overflow safe)."""
    s = np.asarray(s, dtype=np.float64)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of a row softmax given its output ``p``."""
    return p * (grad_p - (grad_p * p).sum(axis=-1, keepdims=True))


def rms_norm(x: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    """Scale each row (last axis) to unit root-mean-square. No learned gain."""
    x = np.asarray(x, dtype=np.float64)
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def rms_norm_backward(x: np.ndarray, grad_out: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    d = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    dot = (grad_out * x).sum(axis=-1, keepdims=True)
    return inv * grad_out - (inv**3) * x * dot / d


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    """x * sigmoid(x); accepts scalars or arrays."""
    arr = np.asarray(x, dtype=np.float64)
    out = arr * sigmoid(np.atleast_1d(arr)).reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = sigmoid(np.asarray(x, dtype=np.float64))
    return s * (1.0 + x * (1.0 - s))


def sample_gaussian(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    if rows <= 0 or cols <= 0:
        raise ValueError(f"dimensions must be positive, got ({rows}, {cols})")
    return rng.standard_normal((rows, cols))


def relative_error(a, b) -> float:
    """Max over entries of |a - b| / max(1, |a|, |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def finite_diff_grad(
    f: Callable[[np.ndarray], float], at: np.ndarray, h: float = FD_STEP
) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array.

    ``f`` receives a perturbed copy of ``at``; the caller's array is never
    modified.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(at, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite objective at flat index {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
