"""Similarity and divergence measures between token latents and prototypes.

Two families live here:

* geometric similarities on latent vectors (cosine, Gaussian kernel,
  multi-head scaled dot product, Mahalanobis against an expert's diagonal
  variance);
* closed-form divergences between diagonal Gaussians (squared
  2-Wasserstein, KL, Jensen-Shannon with a Gaussian midpoint, Hellinger).

Routing always takes the argmax of a *score*, so divergences are negated
when assembled into a score matrix. The scalar functions are the reference
definitions; :func:`score_matrix` is the vectorized form used in training and
:func:`score_matrix_backward` its vector-Jacobian product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
NORM_FLOOR = 1e-12

GEOMETRIC = ("cosine", "gaussian_kernel", "multihead_dot", "mahalanobis")
DISTRIBUTIONAL = ("wasserstein2", "kl", "js", "hellinger")
METRIC_TAGS = GEOMETRIC + DISTRIBUTIONAL


def clamp_log_var(log_var):
    return np.clip(log_var, LOGVAR_MIN, LOGVAR_MAX)


@dataclass(frozen=True)
class DiagGaussian:
    """Diagonal Gaussian; ``log_var`` is clamped to [-10, 10] on construction."""

    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        log_var = np.atleast_1d(np.asarray(self.log_var, dtype=np.float64))
        if mean.shape != log_var.shape:
            raise ShapeError(f"mean {mean.shape} and log_var {log_var.shape} differ")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_var", clamp_log_var(log_var))

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)

    @classmethod
    def from_var(cls, mean, var) -> "DiagGaussian":
        return cls(mean, np.log(np.asarray(var, dtype=np.float64)))


@dataclass(frozen=True)
class MetricKind:
    tag: str = "cosine"
    sigma: float = 1.0
    heads: int = 1

    def __post_init__(self):
        if self.tag not in METRIC_TAGS:
            raise ValueError(f"unknown metric {self.tag!r}; expected one of {METRIC_TAGS}")
        if self.tag == "gaussian_kernel" and not self.sigma > 0:
            raise ValueError(f"gaussian_kernel sigma must be > 0, got {self.sigma}")
        if self.tag == "multihead_dot" and self.heads < 1:
            raise ValueError(f"multihead_dot heads must be >= 1, got {self.heads}")

    @property
    def distributional(self) -> bool:
        return self.tag in DISTRIBUTIONAL

    @property
    def uses_prototype_variance(self) -> bool:
        return self.tag in DISTRIBUTIONAL or self.tag == "mahalanobis"

    def check_dim(self, d: int) -> None:
        if self.tag == "multihead_dot" and d % self.heads:
            raise ValueError(f"heads={self.heads} does not divide latent dim {d}")


def _pair(a: DiagGaussian, b: DiagGaussian):
    if a.mean.shape != b.mean.shape:
        raise ShapeError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    return a.mean, a.var, b.mean, b.var


# --- scalar definitions -------------------------------------------------


def cosine_sim(z, p) -> float:
    z = np.asarray(z, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    nz, np_ = np.linalg.norm(z), np.linalg.norm(p)
    if nz < NORM_FLOOR or np_ < NORM_FLOOR:
        return 0.0
    return float(np.clip(z @ p / (nz * np_), -1.0, 1.0))


def gaussian_kernel_sim(z, p, sigma: float) -> float:
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    d = np.asarray(z, dtype=np.float64) - np.asarray(p, dtype=np.float64)
    return float(np.exp(-(d @ d) / (2.0 * sigma**2)))


def multihead_dot_sim(q, k, heads: int) -> float:
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    d = q.shape[0]
    if heads < 1 or d % heads:
        raise ValueError(f"heads={heads} does not divide dimension {d}")
    dh = d // heads
    per_head = [q[h * dh:(h + 1) * dh] @ k[h * dh:(h + 1) * dh] / math.sqrt(dh) for h in range(heads)]
    return float(np.mean(per_head))


def mahalanobis_sim(z, p: DiagGaussian) -> float:
    """Negated Mahalanobis distance of ``z`` under the expert's variance."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != p.mean.shape:
        raise ShapeError(f"dimension mismatch: {z.shape} vs {p.mean.shape}")
    return -float(np.sqrt(np.sum((z - p.mean) ** 2 / p.var)))


def wasserstein2_sq(a: DiagGaussian, b: DiagGaussian) -> float:
    m1, v1, m2, v2 = _pair(a, b)
    return float(np.sum((m1 - m2) ** 2) + np.sum((np.sqrt(v1) - np.sqrt(v2)) ** 2))


def kl_div(a: DiagGaussian, b: DiagGaussian) -> float:
    """KL(a || b)."""
    m1, v1, m2, v2 = _pair(a, b)
    return float(0.5 * np.sum(np.log(v2 / v1) + (v1 + (m1 - m2) ** 2) / v2 - 1.0))


def js_div(a: DiagGaussian, b: DiagGaussian) -> float:
    """Jensen-Shannon approximation using the moment-matched Gaussian midpoint.

    Per dimension: 1/4 [ln((v1+v2)^2 / 4 v1 v2) + (v1 + (m1-m0)^2)/v0
    + (v2 + (m2-m0)^2)/v0 - 2] with m0, v0 the averaged moments; summed.
    """
    m1, v1, m2, v2 = _pair(a, b)
    m0 = 0.5 * (m1 + m2)
    v0 = 0.5 * (v1 + v2)
    terms = (
        np.log((v1 + v2) ** 2 / (4.0 * v1 * v2))
        + (v1 + (m1 - m0) ** 2) / v0
        + (v2 + (m2 - m0) ** 2) / v0
        - 2.0
    )
    return float(max(0.25 * np.sum(terms), 0.0))


def hellinger(a: DiagGaussian, b: DiagGaussian) -> float:
    """Hellinger distance in [0, 1] via the product of per-dimension
    Bhattacharyya coefficients."""
    m1, v1, m2, v2 = _pair(a, b)
    s = v1 + v2
    bc = np.sqrt(2.0 * np.sqrt(v1 * v2) / s) * np.exp(-0.25 * (m1 - m2) ** 2 / s)
    return float(np.sqrt(max(1.0 - np.prod(bc), 0.0)))


DIVERGENCES = {
    "wasserstein2": wasserstein2_sq,
    "kl": kl_div,
    "js": js_div,
    "hellinger": hellinger,
}


def pair_score(z: DiagGaussian, p: DiagGaussian, kind: MetricKind) -> float:
    """Score of one token against one prototype, higher = more similar."""
    if kind.tag == "cosine":
        return cosine_sim(z.mean, p.mean)
    if kind.tag == "gaussian_kernel":
        return gaussian_kernel_sim(z.mean, p.mean, kind.sigma)
    if kind.tag == "multihead_dot":
        return multihead_dot_sim(z.mean, p.mean, kind.heads)
    if kind.tag == "mahalanobis":
        return mahalanobis_sim(z.mean, p)
    return -DIVERGENCES[kind.tag](z, p)


# --- vectorized scores ------------------------------------------------


def _check(tok_mean, proto_mean):
    if tok_mean.ndim != 2 or proto_mean.ndim != 2 or tok_mean.shape[1] != proto_mean.shape[1]:
        raise ShapeError(f"token batch {tok_mean.shape} does not match prototypes {proto_mean.shape}")


def _lv(log_var, like):
    if log_var is None:
        return np.full_like(like, LOGVAR_MIN)
    return clamp_log_var(log_var)


def _lv_mask(log_var, like):
    if log_var is None:
        return np.zeros_like(like)
    return ((log_var > LOGVAR_MIN) & (log_var < LOGVAR_MAX)).astype(np.float64)


def score_matrix(tok_mean, tok_log_var, proto_mean, proto_log_var, kind: MetricKind) -> np.ndarray:
    """(B, M) scores between token latents and expert prototypes.

    Geometric kinds read only ``tok_mean`` (pass the sampled latents there).
    A ``None`` log-variance stands for a point mass and is floored at the
    clamp minimum.
    """
    tok_mean = np.asarray(tok_mean, dtype=np.float64)
    proto_mean = np.asarray(proto_mean, dtype=np.float64)
    _check(tok_mean, proto_mean)
    kind.check_dim(tok_mean.shape[1])
    tag = kind.tag

    if tag == "cosine":
        a = np.linalg.norm(tok_mean, axis=1)
        b = np.linalg.norm(proto_mean, axis=1)
        ok = (a >= NORM_FLOOR)[:, None] & (b >= NORM_FLOOR)[None, :]
        denom = np.where(ok, np.outer(a, b), 1.0)
        return np.where(ok, (tok_mean @ proto_mean.T) / denom, 0.0)
    if tag == "multihead_dot":
        dh = tok_mean.shape[1] // kind.heads
        return (tok_mean @ proto_mean.T) / (kind.heads * math.sqrt(dh))

    diff = tok_mean[:, None, :] - proto_mean[None, :, :]
    if tag == "gaussian_kernel":
        return np.exp(-np.sum(diff**2, axis=2) / (2.0 * kind.sigma**2))

    plv = _lv(proto_log_var, proto_mean)[None, :, :]
    if tag == "mahalanobis":
        return -np.sqrt(np.sum(diff**2 * np.exp(-plv), axis=2))

    tlv = _lv(tok_log_var, tok_mean)[:, None, :]
    v1, v2 = np.exp(tlv), np.exp(plv)
    if tag == "wasserstein2":
        dist = np.sum(diff**2 + (np.exp(0.5 * tlv) - np.exp(0.5 * plv)) ** 2, axis=2)
    elif tag == "kl":
        dist = 0.5 * np.sum(plv - tlv + (v1 + diff**2) / v2 - 1.0, axis=2)
    elif tag == "js":
        s = v1 + v2
        dist = 0.25 * np.sum(2.0 * np.log(s) - math.log(4.0) - tlv - plv + diff**2 / s, axis=2)
        dist = np.maximum(dist, 0.0)
    else:  # hellinger
        s = v1 + v2
        log_bc = 0.5 * math.log(2.0) + 0.25 * (tlv + plv) - 0.5 * np.log(s) - 0.25 * diff**2 / s
        dist = np.sqrt(np.maximum(1.0 - np.exp(np.sum(log_bc, axis=2)), 0.0))
    return -dist


def score_matrix_backward(grad_s, tok_mean, tok_log_var, proto_mean, proto_log_var, kind: MetricKind):
    """Back-propagate ``grad_s`` (dL/dS, shape (B, M)) through :func:`score_matrix`.

    Returns ``(g_tok_mean, g_tok_log_var, g_proto_mean, g_proto_log_var)``.
    Log-variance gradients are zero outside the clamp window and ``None``
    when the metric does not read that input.
    """
    g = np.asarray(grad_s, dtype=np.float64)
    z, k = tok_mean, proto_mean
    tag = kind.tag

    if tag == "cosine":
        a = np.linalg.norm(z, axis=1)
        b = np.linalg.norm(k, axis=1)
        ok = (a >= NORM_FLOOR)[:, None] & (b >= NORM_FLOOR)[None, :]
        a_s = np.where(a >= NORM_FLOOR, a, 1.0)
        b_s = np.where(b >= NORM_FLOOR, b, 1.0)
        s = np.where(ok, (z @ k.T) / np.outer(a_s, b_s), 0.0)
        g = np.where(ok, g, 0.0)
        gs = g * s
        gz = ((g / b_s[None, :]) @ k) / a_s[:, None] - gs.sum(1)[:, None] * z / (a_s**2)[:, None]
        gk = ((g / a_s[:, None]).T @ z) / b_s[:, None] - gs.sum(0)[:, None] * k / (b_s**2)[:, None]
        return gz, None, gk, None
    if tag == "multihead_dot":
        c = 1.0 / (kind.heads * math.sqrt(z.shape[1] // kind.heads))
        return c * (g @ k), None, c * (g.T @ z), None

    diff = z[:, None, :] - k[None, :, :]
    g3 = g[:, :, None]
    if tag == "gaussian_kernel":
        s = np.exp(-np.sum(diff**2, axis=2) / (2.0 * kind.sigma**2))
        w = -(g * s)[:, :, None] * diff / kind.sigma**2
        return w.sum(1), None, -w.sum(0), None

    plv = _lv(proto_log_var, k)[None, :, :]
    pmask = _lv_mask(proto_log_var, k)
    if tag == "mahalanobis":
        inv_v = np.exp(-plv)
        r = np.sqrt(np.sum(diff**2 * inv_v, axis=2))
        coef = np.where(r > 0, g / np.where(r > 0, r, 1.0), 0.0)[:, :, None]
        gz3 = -coef * diff * inv_v
        gplv = (0.5 * coef * diff**2 * inv_v).sum(0) * pmask
        return gz3.sum(1), None, -gz3.sum(0), gplv

    tlv = _lv(tok_log_var, z)[:, None, :]
    tmask = _lv_mask(tok_log_var, z)
    v1, v2 = np.exp(tlv), np.exp(plv)
    # partials of the *divergence*; scores are its negation
    if tag == "wasserstein2":
        s1, s2 = np.exp(0.5 * tlv), np.exp(0.5 * plv)
        d_m1 = 2.0 * diff
        d_m2 = -d_m1
        d_l1 = (s1 - s2) * s1
        d_l2 = -(s1 - s2) * s2
    elif tag == "kl":
        d_m1 = diff / v2
        d_m2 = -d_m1
        d_l1 = 0.5 * (v1 / v2 - 1.0)
        d_l2 = 0.5 * (1.0 - (v1 + diff**2) / v2)
    elif tag == "js":
        s = v1 + v2
        d_m1 = 0.5 * diff / s
        d_m2 = -d_m1
        d_l1 = 0.25 * (2.0 * v1 / s - 1.0 - diff**2 * v1 / s**2)
        d_l2 = 0.25 * (2.0 * v2 / s - 1.0 - diff**2 * v2 / s**2)
    else:  # hellinger
        s = v1 + v2
        log_bc = 0.5 * math.log(2.0) + 0.25 * (tlv + plv) - 0.5 * np.log(s) - 0.25 * diff**2 / s
        bc = np.exp(np.sum(log_bc, axis=2))
        h = np.sqrt(np.maximum(1.0 - bc, 0.0))
        # dH/dtheta = -(BC / 2H) dlogBC/dtheta
        f = np.where(h > 1e-12, -bc / (2.0 * np.where(h > 1e-12, h, 1.0)), 0.0)[:, :, None]
        d_m1 = f * (-0.5 * diff / s)
        d_m2 = -d_m1
        d_l1 = f * (0.25 - 0.5 * v1 / s + 0.25 * diff**2 * v1 / s**2)
        d_l2 = f * (0.25 - 0.5 * v2 / s + 0.25 * diff**2 * v2 / s**2)
    gz = -(g3 * d_m1).sum(1)
    gk = -(g3 * d_m2).sum(0)
    gtlv = -(g3 * d_l1).sum(1) * tmask
    gplv = -(g3 * d_l2).sum(0) * pmask
    return gz, (gtlv if tok_log_var is not None else None), gk, gplv
