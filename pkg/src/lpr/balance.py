"""Expert-load accounting: Gini coefficient, min-max ratio, load variance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .numerics import ShapeError

MINMAX_EPS = 1e-12
LOAD_MODES = ("hard-count", "soft-prob")


class UndefinedInputError(ValueError):
    """Balance statistic requested for an all-zero load vector."""


def _loads(loads) -> np.ndarray:
    arr = np.asarray(loads, dtype=np.float64).ravel()
    if arr.size == 0 or np.any(arr < 0):
        raise ValueError("loads must be a nonempty vector of nonnegative values")
    return arr


def gini(loads) -> float:
    """Gini coefficient of an expert-load vector.

    0 for a perfectly even load, (n - 1) / n when one expert takes everything.
    """
    arr = np.sort(_loads(loads))
    n = arr.size
    total = arr.sum()
    if total <= 0:
        raise UndefinedInputError("Gini is undefined when every load is zero")
    i = np.arange(1, n + 1)
    # rounding can leave a tiny negative value on perfectly even loads
    return max(0.0, float(np.sum((2 * i - n - 1) * arr) / (n * total)))


def min_max_ratio(loads, eps: float = MINMAX_EPS) -> float:
    arr = _loads(loads)
    return float(arr.min() / (arr.max() + eps))


def accumulate_loads(decisions: Iterable, mode: str = "hard-count", n_experts: int | None = None) -> np.ndarray:
    """Sum routing decisions into one load vector.

    hard-count adds 1 per (token, selected expert); soft-prob adds the full
    router probability rows.
    """
    if mode not in LOAD_MODES:
        raise ValueError(f"unknown load mode {mode!r}")
    total = None if n_experts is None else np.zeros(n_experts)
    for dec in decisions:
        m = dec.probs.shape[1]
        if total is None:
            total = np.zeros(m)
        elif total.size != m:
            raise ShapeError(f"decision has {m} experts, expected {total.size}")
        if mode == "hard-count":
            total += np.bincount(dec.topk_idx.ravel(), minlength=m)
        else:
            total += dec.probs.sum(axis=0)
    if total is None:
        raise ValueError("no decisions to accumulate")
    return total


@dataclass
class LoadStats:
    loads: np.ndarray
    gini: float
    min_max: float
    variance: float

    @classmethod
    def of(cls, loads) -> "LoadStats":
        arr = _loads(loads)
        return cls(arr, gini(arr), min_max_ratio(arr), float(np.var(arr)))

    def merge(self, other: "LoadStats") -> "LoadStats":
        return LoadStats.of(self.loads + other.loads)
