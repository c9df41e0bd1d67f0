"""Toy mixture-of-experts layer and a skewed-cluster synthetic corpus.

Experts are two-layer SiLU feed-forward nets stored stacked along a leading
expert axis. Only the experts a token selected are evaluated for it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import ShapeError, silu, silu_grad
from .router import RoutingDecision


@dataclass
class ExpertNet:
    w_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    def __call__(self, x):
        return silu(np.asarray(x, dtype=np.float64) @ self.w_in + self.b_in) @ self.w_out + self.b_out


@dataclass
class ExpertBank:
    """M experts with parameters stacked on axis 0."""

    w_in: np.ndarray   # (M, d_model, d_ff)
    b_in: np.ndarray   # (M, d_ff)
    w_out: np.ndarray  # (M, d_ff, d_model)
    b_out: np.ndarray  # (M, d_model)

    @classmethod
    def create(cls, rng, n_experts, d_model, d_ff, out_scale=1.0):
        if d_ff < 1:
            raise ValueError("d_ff must be >= 1")
        return cls(
            rng.standard_normal((n_experts, d_model, d_ff)) / math.sqrt(d_model),
            np.zeros((n_experts, d_ff)),
            out_scale * rng.standard_normal((n_experts, d_ff, d_model)) / math.sqrt(d_ff),
            np.zeros((n_experts, d_model)),
        )

    @classmethod
    def from_nets(cls, nets) -> "ExpertBank":
        return cls(*(np.stack([getattr(n, f) for n in nets]) for f in ("w_in", "b_in", "w_out", "b_out")))

    @property
    def n_experts(self) -> int:
        return self.w_in.shape[0]

    def __len__(self):
        return self.n_experts

    def __getitem__(self, i) -> ExpertNet:
        return ExpertNet(self.w_in[i], self.b_in[i], self.w_out[i], self.b_out[i])

    def arrays(self) -> dict:
        return {"w_in": self.w_in, "b_in": self.b_in, "w_out": self.w_out, "b_out": self.b_out}


@dataclass
class ExpertCache:
    x: np.ndarray
    gates: np.ndarray
    # per active expert: (expert, token rows, pre-activation, hidden, output)
    blocks: list


@dataclass
class MoEOutput:
    y: np.ndarray
    decision: RoutingDecision
    task_loss: Optional[float] = None
    cache: Optional[ExpertCache] = None


def mse(y, targets) -> float:
    return float(np.mean((y - targets) ** 2))


def moe_forward(experts: ExpertBank, decision: RoutingDecision, x, targets=None) -> MoEOutput:
    """y_t = sum over selected experts i of w_ti * E_i(x_t)."""
    x = np.asarray(x, dtype=np.float64)
    if experts.n_experts != decision.n_experts:
        raise ShapeError(f"{experts.n_experts} experts but router scores {decision.n_experts}")
    if x.ndim != 2 or x.shape[0] != decision.probs.shape[0] or x.shape[1] != experts.w_in.shape[1]:
        raise ShapeError(f"tokens {x.shape} do not match experts / decision")
    gates = decision.gates()
    mask = decision.mask()
    y = np.zeros((x.shape[0], experts.w_out.shape[2]))
    blocks = []
    for e in np.flatnonzero(mask.any(axis=0)):
        rows = np.flatnonzero(mask[:, e])
        u = x[rows] @ experts.w_in[e] + experts.b_in[e]
        a = silu(u)
        out = a @ experts.w_out[e] + experts.b_out[e]
        y[rows] += gates[rows, e, None] * out
        blocks.append((e, rows, u, a, out))
    loss = None if targets is None else mse(y, targets)
    return MoEOutput(y, decision, loss, ExpertCache(x, gates, blocks))


def moe_backward(experts: ExpertBank, out: MoEOutput, g_y):
    """Gradients of the expert parameters, the dense gates, and the input.

    Experts that no token selected get exactly zero gradient.
    """
    c = out.cache
    grads = {k: np.zeros_like(v) for k, v in experts.arrays().items()}
    g_gates = np.zeros_like(c.gates)
    g_x = np.zeros_like(c.x)
    for e, rows, u, a, o in c.blocks:
        gy = g_y[rows]
        g_gates[rows, e] = np.sum(gy * o, axis=1)
        g_o = c.gates[rows, e, None] * gy
        grads["w_out"][e] = a.T @ g_o
        grads["b_out"][e] = g_o.sum(0)
        g_u = (g_o @ experts.w_out[e].T) * silu_grad(u)
        grads["w_in"][e] = c.x[rows].T @ g_u
        grads["b_in"][e] = g_u.sum(0)
        g_x[rows] += g_u @ experts.w_in[e].T
    return grads, g_gates, g_x


def aux_balance_loss(decision: RoutingDecision) -> float:
    """Switch-style balance loss M * sum_e f_e * mean_prob_e; 1 when balanced.

    ``f_e`` is the share of (token, slot) assignments that went to expert e.
    """
    m = decision.n_experts
    counts = np.bincount(decision.topk_idx.ravel(), minlength=m)
    f = counts / decision.topk_idx.size
    return float(m * np.sum(f * decision.probs.mean(axis=0)))


def aux_balance_grad(decision: RoutingDecision) -> np.ndarray:
    """d aux / d probs, with the assignment fractions held constant."""
    m = decision.n_experts
    b = decision.probs.shape[0]
    f = np.bincount(decision.topk_idx.ravel(), minlength=m) / decision.topk_idx.size
    return np.broadcast_to(m * f / b, decision.probs.shape).copy()


# --- synthetic corpus -------------------------------------------------


def zipf_weights(n: int, s: float) -> np.ndarray:
    if s < 0:
        raise ValueError("Zipf exponent must be >= 0")
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** s
    return w / w.sum()


@dataclass
class SyntheticCorpusSpec:
    """Gaussian clusters with Zipf-distributed frequencies and a per-cluster
    linear regression target ``x @ target_maps[c] + target_bias[c]``.

    ``target_noise`` adds i.i.d. Gaussian noise to the targets, which gives
    the task an irreducible loss floor of ``target_noise ** 2``.
    """

    cluster_means: np.ndarray   # (C, d_model)
    mixing_weights: np.ndarray  # (C,)
    noise_std: float
    target_maps: np.ndarray     # (C, d_model, d_model)
    target_bias: np.ndarray     # (C, d_model)
    target_noise: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.mixing_weights, dtype=np.float64)
        if w.ndim != 1 or np.any(w < 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("mixing weights must be a probability vector")
        if self.noise_std < 0 or self.target_noise < 0:
            raise ValueError("noise levels must be >= 0")

    @property
    def n_clusters(self) -> int:
        return self.cluster_means.shape[0]

    @property
    def d_model(self) -> int:
        return self.cluster_means.shape[1]

    @classmethod
    def make(cls, rng, n_clusters=16, d_model=32, zipf_s=1.0, noise_std=0.3, cluster_scale=1.0,
             target_scale=1.0, offset_scale=0.0, target_noise=0.0):
        """Random clusters. ``offset_scale`` sets the size of one direction
        shared by every cluster mean (an anisotropic, off-center token cloud)."""
        means = cluster_scale * rng.standard_normal((n_clusters, d_model))
        means += offset_scale * rng.standard_normal(d_model)
        maps = target_scale * rng.standard_normal((n_clusters, d_model, d_model)) / math.sqrt(d_model)
        bias = target_scale * rng.standard_normal((n_clusters, d_model))
        return cls(means, zipf_weights(n_clusters, zipf_s), float(noise_std), maps, bias, float(target_noise))


def generate_batch(spec: SyntheticCorpusSpec, rng, batch_size: int):
    """Draw ``batch_size`` tokens; returns (tokens, targets, cluster labels)."""
    labels = rng.choice(spec.n_clusters, size=batch_size, p=spec.mixing_weights)
    x = spec.cluster_means[labels] + spec.noise_std * rng.standard_normal((batch_size, spec.d_model))
    targets = np.einsum("bd,bde->be", x, spec.target_maps[labels]) + spec.target_bias[labels]
    if spec.target_noise:
        targets = targets + spec.target_noise * rng.standard_normal(targets.shape)
    return x, targets, labels
