"""Latent prototype routing and the vanilla linear baseline.

A latent prototype router encodes each token into a small latent space
(``silu(rms_norm(x)) @ w1 + b1``, optionally as a diagonal Gaussian sampled
with the reparameterization trick), scores it against per-expert prototypes
with a metric from :mod:`lpr.metrics`, and keeps the top-k experts with
renormalized softmax weights. Three regularizers shape the latent space:
KL to a standard normal prior, a diversity penalty, and an alignment loss
that pulls softly aggregated prototypes toward the (detached) token latents.

Gradients are analytic. The selection of the top-k set is treated as a
constant; gradients flow through the renormalized weights of the selected
experts only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import numerics as nx
from .metrics import LOGVAR_MAX, LOGVAR_MIN, MetricKind, score_matrix, score_matrix_backward
from .numerics import ShapeError

ENCODER_MODES = ("deterministic", "variational", "variational-eval")
DIVERSITY_KINDS = ("orthogonal", "cosine", "euclidean")
DIVERSITY_TARGETS = ("prototypes", "tokens", "both")
INIT_KINDS = ("hyperspherical", "gaussian", "orthogonal")


class ContractError(ValueError):
    """An operation was applied to inputs outside its domain."""


# --- parameters -------------------------------------------------------


@dataclass
class EncoderParams:
    w1: np.ndarray
    b1: np.ndarray
    w_lv: Optional[np.ndarray] = None
    b_lv: Optional[np.ndarray] = None

    def __post_init__(self):
        d_model, d_latent = self.w1.shape
        if d_latent > d_model:
            raise ShapeError(f"latent dim {d_latent} exceeds model dim {d_model}")
        if (self.w_lv is None) != (self.b_lv is None):
            raise ValueError("variational head needs both w_lv and b_lv")

    @property
    def variational(self) -> bool:
        return self.w_lv is not None

    @property
    def d_model(self) -> int:
        return self.w1.shape[0]

    @property
    def d_latent(self) -> int:
        return self.w1.shape[1]


def init_encoder(rng, d_model, d_latent, variational=True, init_log_var=0.0) -> EncoderParams:
    w1 = rng.standard_normal((d_model, d_latent)) / math.sqrt(d_model)
    b1 = np.zeros(d_latent)
    if not variational:
        return EncoderParams(w1, b1)
    w_lv = 0.01 * rng.standard_normal((d_model, d_latent)) / math.sqrt(d_model)
    return EncoderParams(w1, b1, w_lv, np.full(d_latent, float(init_log_var)))


@dataclass
class ExpertPrototypes:
    means: np.ndarray
    log_vars: np.ndarray
    unit_ball: bool = True

    def __post_init__(self):
        if self.means.shape != self.log_vars.shape:
            raise ShapeError(f"means {self.means.shape} vs log_vars {self.log_vars.shape}")

    @property
    def n_experts(self) -> int:
        return self.means.shape[0]

    def project(self) -> None:
        """Shrink any mean row longer than 1 back onto the unit sphere (in place)."""
        if not self.unit_ball:
            return
        norms = np.linalg.norm(self.means, axis=1, keepdims=True)
        self.means /= np.maximum(norms, 1.0)


def hyperspherical_init(rng, n_experts: int, d_latent: int, unit_ball: bool = True) -> ExpertPrototypes:
    """Gaussian rows normalized onto the unit sphere; log-variances start at 0."""
    if n_experts < 1 or d_latent < 1:
        raise ValueError("need at least one expert and one latent dimension")
    r = rng.standard_normal((n_experts, d_latent))
    means = r / np.linalg.norm(r, axis=1, keepdims=True)
    return ExpertPrototypes(means, np.zeros_like(means), unit_ball)


def gaussian_init(rng, n_experts: int, d_latent: int, unit_ball: bool = False) -> ExpertPrototypes:
    """Unnormalized standard normal prototypes (the comparison baseline)."""
    means = rng.standard_normal((n_experts, d_latent))
    protos = ExpertPrototypes(means, np.zeros_like(means), unit_ball)
    protos.project()
    return protos


def orthogonal_init(rng, n_experts: int, d_latent: int, unit_ball: bool = True) -> ExpertPrototypes:
    """Rows from stacked random orthonormal bases (exactly orthogonal when M <= d)."""
    blocks = []
    for _ in range(-(-n_experts // d_latent)):
        q, r = np.linalg.qr(rng.standard_normal((d_latent, d_latent)))
        blocks.append(q * np.sign(np.diag(r)))
    means = np.concatenate(blocks, axis=0)[:n_experts].copy()
    return ExpertPrototypes(means, np.zeros_like(means), unit_ball)


def init_prototypes(kind: str, rng, n_experts: int, d_latent: int, unit_ball: bool = True) -> ExpertPrototypes:
    if kind == "hyperspherical":
        return hyperspherical_init(rng, n_experts, d_latent, unit_ball)
    if kind == "gaussian":
        return gaussian_init(rng, n_experts, d_latent, unit_ball)
    if kind == "orthogonal":
        return orthogonal_init(rng, n_experts, d_latent, unit_ball)
    raise ValueError(f"unknown init kind {kind!r}")


# --- encoding ---------------------------------------------------------


@dataclass
class Latents:
    """Per-token posterior and the latents actually routed.

    ``log_var`` is ``None`` for the deterministic encoder (a point mass).
    """

    mean: np.ndarray
    log_var: Optional[np.ndarray]
    z: np.ndarray
    eps: Optional[np.ndarray] = None
    mode: str = "deterministic"
    # forward cache for encode_backward
    x: Optional[np.ndarray] = field(default=None, repr=False)
    hidden: Optional[np.ndarray] = field(default=None, repr=False)
    lv_raw: Optional[np.ndarray] = field(default=None, repr=False)


def encode(params: EncoderParams, x, rng=None, mode: str = "variational", eps=None) -> Latents:
    """Map tokens (B, d_model) to latents (B, d_latent).

    ``variational`` samples ``z = mean + exp(log_var / 2) * eps`` (``eps`` is
    drawn from ``rng`` unless given); ``variational-eval`` routes the mean.
    """
    if mode not in ENCODER_MODES:
        raise ValueError(f"unknown encoder mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_model:
        raise ShapeError(f"tokens {x.shape} do not match encoder input dim {params.d_model}")
    hidden = nx.silu(nx.rms_norm(x))
    mean = hidden @ params.w1 + params.b1
    if mode == "deterministic":
        return Latents(mean, None, mean, None, mode, x, hidden, None)
    if not params.variational:
        raise ContractError(f"mode {mode!r} needs a variational head")
    lv_raw = hidden @ params.w_lv + params.b_lv
    log_var = np.clip(lv_raw, LOGVAR_MIN, LOGVAR_MAX)
    if mode == "variational-eval":
        return Latents(mean, log_var, mean, None, mode, x, hidden, lv_raw)
    if eps is None:
        if rng is None:
            raise ContractError("variational sampling needs an rng or explicit eps")
        eps = nx.sample_gaussian(rng, *mean.shape)
    z = mean + np.exp(0.5 * log_var) * eps
    return Latents(mean, log_var, z, eps, mode, x, hidden, lv_raw)


def encode_backward(params: EncoderParams, lat: Latents, g_z=None, g_mean=None, g_log_var=None):
    """Gradients of the encoder parameters and of the input tokens.

    ``g_z`` is routed into mean and log-variance through the sampling step.
    Returns ``(grads, g_x)`` with ``grads`` keyed like :func:`encoder_arrays`.
    """
    gm = np.zeros_like(lat.mean) if g_mean is None else np.array(g_mean, dtype=np.float64)
    glv = None
    if lat.log_var is not None:
        glv = np.zeros_like(lat.mean) if g_log_var is None else np.array(g_log_var, dtype=np.float64)
    if g_z is not None:
        gm += g_z
        if lat.mode == "variational":
            glv += g_z * lat.eps * 0.5 * np.exp(0.5 * lat.log_var)
    grads = {"w1": lat.hidden.T @ gm, "b1": gm.sum(0)}
    g_hidden = gm @ params.w1.T
    if params.variational:
        if glv is None:
            glv = np.zeros_like(lat.mean)
        glv = glv * ((lat.lv_raw > LOGVAR_MIN) & (lat.lv_raw < LOGVAR_MAX))
        grads["w_lv"] = lat.hidden.T @ glv
        grads["b_lv"] = glv.sum(0)
        g_hidden = g_hidden + glv @ params.w_lv.T
    r = nx.rms_norm(lat.x)
    g_x = nx.rms_norm_backward(lat.x, g_hidden * nx.silu_grad(r))
    return grads, g_x


# --- regularizers -----------------------------------------------------


def kl_loss(lat: Latents) -> float:
    """Mean over tokens of KL(N(mean, var) || N(0, I))."""
    if lat.log_var is None:
        raise ContractError("KL to the prior is undefined for deterministic (point-mass) latents")
    m, lv = lat.mean, lat.log_var
    return float(np.mean(0.5 * np.sum(m * m + np.exp(lv) - lv - 1.0, axis=1)))


def kl_loss_grad(lat: Latents):
    """(d/dmean, d/dlog_var) of :func:`kl_loss`."""
    n = lat.mean.shape[0]
    return lat.mean / n, 0.5 * (np.exp(lat.log_var) - 1.0) / n


def _normalize_rows(t):
    norms = np.linalg.norm(t, axis=1, keepdims=True)
    safe = np.maximum(norms, nx.RMS_EPS)
    return t / safe, safe


def diversity_loss_and_grad(target, kind: str = "orthogonal"):
    """Diversity penalty over the rows of ``target`` and its gradient.

    orthogonal: ||G G^T - I||_F^2 with G the row-normalized target;
    cosine: mean positive off-diagonal cosine similarity;
    euclidean: mean off-diagonal exp(-||t_i - t_j||^2).
    """
    t = np.asarray(target, dtype=np.float64)
    n = t.shape[0]
    if kind not in DIVERSITY_KINDS:
        raise ValueError(f"unknown diversity kind {kind!r}")
    if n < 2:
        return 0.0, np.zeros_like(t)
    pairs = n * (n - 1)
    if kind == "euclidean":
        diff = t[:, None, :] - t[None, :, :]
        e = np.exp(-np.sum(diff**2, axis=2))
        np.fill_diagonal(e, 0.0)
        value = e.sum() / pairs
        grad = -(4.0 / pairs) * np.einsum("ij,ijd->id", e, diff)
        return float(value), grad

    g, norms = _normalize_rows(t)
    gram = g @ g.T
    if kind == "orthogonal":
        resid = gram - np.eye(n)
        value = float(np.sum(resid**2))
        g_g = 4.0 * resid @ g
    else:
        off = gram.copy()
        np.fill_diagonal(off, 0.0)
        pos = off > 0
        value = float(np.sum(off[pos]) / pairs)
        g_g = 2.0 * (pos / pairs) @ g
    # back through row normalization
    grad = (g_g - np.sum(g_g * g, axis=1, keepdims=True) * g) / norms
    return value, grad


def diversity_loss(target, kind: str = "orthogonal") -> float:
    return diversity_loss_and_grad(target, kind)[0]


def alignment_loss(z, probs, means) -> float:
    """Mean squared distance between each (detached) latent and P @ K."""
    z = np.asarray(z, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (z.shape[0], means.shape[0]) or z.shape[1] != means.shape[1]:
        raise ShapeError(f"latents {z.shape}, probs {probs.shape}, prototypes {means.shape} do not conform")
    resid = z - probs @ means
    return float(np.mean(np.sum(resid**2, axis=1)))


def alignment_loss_grad(z, probs, means) -> np.ndarray:
    """Gradient w.r.t. prototype means only; latents and probs are detached."""
    resid = z - probs @ means
    return -(2.0 / z.shape[0]) * probs.T @ resid


# --- routing ----------------------------------------------------------


@dataclass
class RoutingDecision:
    topk_idx: np.ndarray
    topk_w: np.ndarray
    probs: np.ndarray
    scores: np.ndarray

    @property
    def n_experts(self) -> int:
        return self.probs.shape[1]

    @property
    def k(self) -> int:
        return self.topk_idx.shape[1]

    def gates(self) -> np.ndarray:
        """Dense (B, M) gate matrix, zero outside the selected experts."""
        out = np.zeros_like(self.probs)
        np.put_along_axis(out, self.topk_idx, self.topk_w, axis=1)
        return out

    def mask(self) -> np.ndarray:
        out = np.zeros(self.probs.shape, dtype=bool)
        np.put_along_axis(out, self.topk_idx, True, axis=1)
        return out


def topk_indices(probs, k: int) -> np.ndarray:
    """Indices of the k largest entries per row; ties go to the lower index."""
    return np.argsort(-probs, axis=1, kind="stable")[:, :k]


def decide(scores, k: int, topk_idx=None) -> RoutingDecision:
    scores = np.asarray(scores, dtype=np.float64)
    m = scores.shape[1]
    if not 1 <= k <= m:
        raise ValueError(f"k must satisfy 1 <= k <= M (got k={k}, M={m})")
    probs = nx.softmax_rows(scores)
    if topk_idx is None:
        topk_idx = topk_indices(probs, k)
    sel = np.take_along_axis(probs, topk_idx, axis=1)
    return RoutingDecision(topk_idx, sel / sel.sum(axis=1, keepdims=True), probs, scores)


def gate_backward(decision: RoutingDecision, g_gates) -> np.ndarray:
    """dL/dscores from dL/d(dense gates); selection indices held fixed."""
    g_sel = np.take_along_axis(g_gates, decision.topk_idx, axis=1)
    w = decision.topk_w
    g_s_sel = w * (g_sel - np.sum(w * g_sel, axis=1, keepdims=True))
    out = np.zeros_like(decision.scores)
    np.put_along_axis(out, decision.topk_idx, g_s_sel, axis=1)
    return out


def token_inputs(lat: Latents, kind: MetricKind):
    """Token-side metric inputs: sampled latents for geometric kinds, the
    posterior for distributional ones."""
    if kind.distributional:
        return lat.mean, lat.log_var
    return lat.z, None


def route(lat: Latents, prototypes: ExpertPrototypes, kind: MetricKind, k: int) -> RoutingDecision:
    tm, tlv = token_inputs(lat, kind)
    s = score_matrix(tm, tlv, prototypes.means, prototypes.log_vars, kind)
    return decide(s, k)


def vanilla_route(x, w, k: int) -> RoutingDecision:
    """Linear router: scores = x @ w.T with ``w`` holding one key per expert."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"tokens {x.shape} do not match expert keys {w.shape}")
    return decide(x @ w.T, k)


def ema_update(prototypes: ExpertPrototypes, z, decision: RoutingDecision, lam: float, mode: str = "hard") -> ExpertPrototypes:
    """Return prototypes with means moved toward their assigned latents.

    hard: each expert averages the tokens whose top-k set contains it and is
    left untouched when no token selected it. soft: probability-weighted mean
    over all tokens.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1], got {lam}")
    z = np.asarray(z, dtype=np.float64)
    if mode == "hard":
        weights = decision.mask().astype(np.float64)
    elif mode == "soft":
        weights = decision.probs
    else:
        raise ValueError(f"unknown EMA mode {mode!r}")
    totals = weights.sum(axis=0)
    active = totals > 0
    means = prototypes.means.copy()
    batch_mean = (weights.T @ z)[active] / totals[active, None]
    means[active] = lam * means[active] + (1.0 - lam) * batch_mean
    out = replace(prototypes, means=means, log_vars=prototypes.log_vars.copy())
    out.project()
    return out


# --- router objects ---------------------------------------------------


@dataclass
class LprConfig:
    """Regularization weights and switches for a latent prototype router."""

    beta_rs: float = 0.01
    beta_div: float = 1.0
    beta_align: float = 0.05
    beta_kl: float = 0.01
    diversity: str = "orthogonal"
    diversity_target: str = "both"
    encoder_mode: str = "variational"

    def __post_init__(self):
        if self.diversity not in DIVERSITY_KINDS:
            raise ValueError(f"unknown diversity kind {self.diversity!r}")
        if self.diversity_target not in DIVERSITY_TARGETS:
            raise ValueError(f"unknown diversity target {self.diversity_target!r}")
        if self.encoder_mode not in ("deterministic", "variational"):
            raise ValueError(f"encoder mode must be deterministic or variational, got {self.encoder_mode!r}")


@dataclass
class LprLosses:
    kl: float = 0.0
    diversity: float = 0.0
    alignment: float = 0.0
    total_reg: float = 0.0


def combine(cfg: LprConfig, diversity: float, alignment: float, kl: float) -> float:
    return cfg.beta_rs * (cfg.beta_div * diversity + cfg.beta_align * alignment + cfg.beta_kl * kl)


@dataclass
class Detached:
    """Values held constant under differentiation: the top-k selection and
    the inputs of the alignment loss."""

    topk_idx: np.ndarray
    z: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None


@dataclass
class RouterPass:
    x: np.ndarray
    decision: RoutingDecision
    losses: LprLosses
    detached: Detached
    latents: Optional[Latents] = None
    div_grad: dict = field(default_factory=dict)


class LatentPrototypeRouter:
    """Encoder + prototypes + metric. Parameters are exposed as a flat dict of
    arrays (:meth:`arrays`) that optimizers update in place."""

    def __init__(self, encoder: EncoderParams, prototypes: ExpertPrototypes, metric: MetricKind, k: int, config: LprConfig):
        metric.check_dim(encoder.d_latent)
        if not 1 <= k <= prototypes.n_experts:
            raise ValueError(f"k must satisfy 1 <= k <= M (got k={k}, M={prototypes.n_experts})")
        if config.encoder_mode == "variational" and not encoder.variational:
            raise ContractError("variational mode needs an encoder with a variational head")
        self.encoder = encoder
        self.prototypes = prototypes
        self.metric = metric
        self.k = k
        self.config = config

    @classmethod
    def create(cls, rng, d_model, d_latent, n_experts, k, metric=None, config=None, init="hyperspherical", unit_ball=True, init_log_var=0.0):
        config = config or LprConfig()
        metric = metric or MetricKind()
        enc = init_encoder(rng, d_model, d_latent, config.encoder_mode == "variational", init_log_var)
        protos = init_prototypes(init, rng, n_experts, d_latent, unit_ball)
        return cls(enc, protos, metric, k, config)

    @property
    def n_experts(self) -> int:
        return self.prototypes.n_experts

    def arrays(self) -> dict:
        out = {"w1": self.encoder.w1, "b1": self.encoder.b1}
        if self.encoder.variational:
            out["w_lv"] = self.encoder.w_lv
            out["b_lv"] = self.encoder.b_lv
        out["proto_mean"] = self.prototypes.means
        if self.metric.uses_prototype_variance:
            out["proto_log_var"] = self.prototypes.log_vars
        return out

    def no_decay(self) -> set:
        return {"b1", "b_lv", "proto_log_var"}

    def project(self) -> None:
        self.prototypes.project()

    def forward(self, x, rng=None, train=True, eps=None, detached: Optional[Detached] = None) -> RouterPass:
        cfg = self.config
        if cfg.encoder_mode == "deterministic":
            mode = "deterministic"
        else:
            mode = "variational" if train else "variational-eval"
        lat = encode(self.encoder, x, rng=rng, mode=mode, eps=eps)
        tm, tlv = token_inputs(lat, self.metric)
        scores = score_matrix(tm, tlv, self.prototypes.means, self.prototypes.log_vars, self.metric)
        dec = decide(scores, self.k, None if detached is None else detached.topk_idx)
        if detached is None:
            detached = Detached(dec.topk_idx, lat.z.copy(), dec.probs.copy())

        kl = kl_loss(lat) if lat.log_var is not None else 0.0
        div, div_grad = 0.0, {}
        for name, target in self._diversity_targets(lat):
            value, div_grad[name] = diversity_loss_and_grad(target, cfg.diversity)
            div += value
        align = alignment_loss(detached.z, detached.probs, self.prototypes.means)
        losses = LprLosses(kl, div, align, combine(cfg, div, align, kl))
        return RouterPass(np.asarray(x, dtype=np.float64), dec, losses, detached, lat, div_grad)

    def _diversity_targets(self, lat: Latents):
        """(name, matrix) pairs the diversity penalty applies to. Token
        diversity acts on the encoder means, not on the noisy samples."""
        t = self.config.diversity_target
        if t in ("prototypes", "both"):
            yield "prototypes", self.prototypes.means
        if t in ("tokens", "both"):
            yield "tokens", lat.mean

    def backward(self, rp: RouterPass, g_gates=None, g_probs=None, reg_scale: float = 1.0):
        """Gradients of ``task + reg_scale * total_reg`` given upstream
        gradients on the dense gates and on the full probabilities."""
        cfg, lat, dec = self.config, rp.latents, rp.decision
        g_s = np.zeros_like(dec.scores)
        if g_gates is not None:
            g_s += gate_backward(dec, g_gates)
        if g_probs is not None:
            g_s += nx.softmax_backward(dec.probs, g_probs)

        tm, tlv = token_inputs(lat, self.metric)
        g_tm, g_tlv, g_pm, g_plv = score_matrix_backward(
            g_s, tm, tlv, self.prototypes.means, self.prototypes.log_vars, self.metric
        )
        g_z = np.zeros_like(lat.z)
        g_mean = np.zeros_like(lat.mean)
        g_lv = None if lat.log_var is None else np.zeros_like(lat.mean)
        if self.metric.distributional:
            g_mean += g_tm
            if g_lv is not None and g_tlv is not None:
                g_lv += g_tlv
        else:
            g_z += g_tm

        scale = reg_scale * cfg.beta_rs
        if lat.log_var is not None and scale * cfg.beta_kl:
            km, klv = kl_loss_grad(lat)
            g_mean += scale * cfg.beta_kl * km
            g_lv += scale * cfg.beta_kl * klv
        g_pm = g_pm + scale * cfg.beta_align * alignment_loss_grad(rp.detached.z, rp.detached.probs, self.prototypes.means)
        if "prototypes" in rp.div_grad:
            g_pm = g_pm + scale * cfg.beta_div * rp.div_grad["prototypes"]
        if "tokens" in rp.div_grad:
            g_mean += scale * cfg.beta_div * rp.div_grad["tokens"]

        grads, g_x = encode_backward(self.encoder, lat, g_z=g_z, g_mean=g_mean, g_log_var=g_lv)
        grads["proto_mean"] = g_pm
        if self.metric.uses_prototype_variance:
            grads["proto_log_var"] = g_plv if g_plv is not None else np.zeros_like(self.prototypes.log_vars)
        return grads, g_x


class VanillaRouter:
    """Linear router ``softmax(x @ w.T)`` with top-k gating."""

    def __init__(self, w: np.ndarray, k: int):
        if not 1 <= k <= w.shape[0]:
            raise ValueError(f"k must satisfy 1 <= k <= M (got k={k}, M={w.shape[0]})")
        self.w = w
        self.k = k

    @classmethod
    def create(cls, rng, d_model, n_experts, k, init_std=None):
        std = 1.0 / math.sqrt(d_model) if init_std is None else init_std
        return cls(std * rng.standard_normal((n_experts, d_model)), k)

    @property
    def n_experts(self) -> int:
        return self.w.shape[0]

    def arrays(self) -> dict:
        return {"w_gate": self.w}

    def no_decay(self) -> set:
        return set()

    def project(self) -> None:
        pass

    def forward(self, x, rng=None, train=True, eps=None, detached: Optional[Detached] = None) -> RouterPass:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.w.shape[1]:
            raise ShapeError(f"tokens {x.shape} do not match expert keys {self.w.shape}")
        dec = decide(x @ self.w.T, self.k, None if detached is None else detached.topk_idx)
        return RouterPass(x, dec, LprLosses(), detached or Detached(dec.topk_idx))

    def backward(self, rp: RouterPass, g_gates=None, g_probs=None, reg_scale: float = 1.0):
        dec = rp.decision
        g_s = np.zeros_like(dec.scores)
        if g_gates is not None:
            g_s += gate_backward(dec, g_gates)
        if g_probs is not None:
            g_s += nx.softmax_backward(dec.probs, g_probs)
        return {"w_gate": g_s.T @ rp.x}, g_s @ self.w


def lpr_losses_and_grads(router: LatentPrototypeRouter, x, rng=None, eps=None, detached=None):
    """Regularization losses of one router pass and their gradients w.r.t.
    every router parameter (no task term)."""
    rp = router.forward(x, rng=rng, train=True, eps=eps, detached=detached)
    grads, _ = router.backward(rp)
    return rp.losses, grads
