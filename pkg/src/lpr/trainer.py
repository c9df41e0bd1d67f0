"""Optimization loop for the toy MoE: warmup-stable-decay schedule, AdamW
with global-norm clipping, optional EMA prototype refresh, per-step logging."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .balance import accumulate_loads, gini, min_max_ratio
from .config import ExperimentConfig, OptimizerConfig, ScheduleConfig
from .model import MoEModel, build_model
from .moe import SyntheticCorpusSpec, generate_batch
from .router import LatentPrototypeRouter, LprLosses, ema_update


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


# --- schedule -----------------------------------------------------------


@dataclass
class LrSchedule:
    total_steps: int
    base_lr: float = 1e-3
    min_lr_ratio: float = 0.05
    warmup_frac: float = 0.05
    stable_frac: float = 0.70
    decay_frac: float = 0.25

    def __post_init__(self):
        if not math.isclose(self.warmup_frac + self.stable_frac + self.decay_frac, 1.0, abs_tol=1e-9):
            raise ValueError("warmup, stable and decay fractions must sum to 1")
        self.warmup_steps = int(round(self.warmup_frac * self.total_steps))
        self.decay_steps = int(round(self.decay_frac * self.total_steps))
        self.decay_start = self.total_steps - self.decay_steps

    @classmethod
    def from_config(cls, cfg: ScheduleConfig, total_steps: int) -> "LrSchedule":
        return cls(total_steps, cfg.base_lr, cfg.min_lr_ratio, cfg.warmup_frac, cfg.stable_frac, cfg.decay_frac)


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warmup from 0, constant plateau, cosine decay to base * min_lr_ratio."""
    s = schedule
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.base_lr * step / s.warmup_steps
    if step <= s.decay_start or s.decay_steps == 0:
        return s.base_lr
    progress = (step - s.decay_start) / s.decay_steps
    floor = s.base_lr * s.min_lr_ratio
    return floor + (s.base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


# --- optimizer --------------------------------------------------------------


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: OptimizerConfig) -> "OptimizerState":
        return cls(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, cfg.clip_norm)


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grads(grads: dict, clip_norm: float) -> tuple[dict, float]:
    """Scale all gradients so their joint l2 norm is at most ``clip_norm``."""
    norm = global_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def step(params: dict, grads: dict, opt: OptimizerState, lr: float, no_decay=frozenset(), after=None):
    """One clipped AdamW update, applied to ``params`` in place.

    Weight decay is decoupled (``p *= 1 - lr * wd``) and skipped for names in
    ``no_decay``. ``after`` runs once the parameters moved (unit-ball
    projection). Returns ``(params, opt)``.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}", opt.step)
    grads, _ = clip_grads(grads, opt.clip_norm)
    opt.step += 1
    t = opt.step
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for name, g in grads.items():
        p = params[name]
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        m, v = opt.m[name], opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        if opt.weight_decay and name not in no_decay:
            p *= 1.0 - lr * opt.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    if after is not None:
        after()
    return params, opt


def total_loss(task: float, lpr: LprLosses, beta_rs, beta_div, beta_align, beta_kl) -> float:
    return task + beta_rs * (beta_div * lpr.diversity + beta_align * lpr.alignment + beta_kl * lpr.kl)


# --- training loop --------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    lr: float
    task_loss: float
    kl: float
    diversity: float
    alignment: float
    total: float
    gini: list
    min_max: list
    grad_norm: float = float("nan")


@dataclass
class EvalResult:
    step: int
    test_loss: float
    loads_hard: np.ndarray  # (layers, M)
    loads_soft: np.ndarray

    def _per_layer(self, fn, loads):
        return [fn(row) for row in loads]

    @property
    def gini_hard(self) -> float:
        return float(np.mean(self._per_layer(gini, self.loads_hard)))

    @property
    def gini_soft(self) -> float:
        return float(np.mean(self._per_layer(gini, self.loads_soft)))

    @property
    def min_max_hard(self) -> float:
        return float(np.mean(self._per_layer(min_max_ratio, self.loads_hard)))

    @property
    def min_max_soft(self) -> float:
        return float(np.mean(self._per_layer(min_max_ratio, self.loads_soft)))


def _streams(seed: int, n: int):
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]


class Trainer:
    """Owns the corpus, model, optimizer and RNG streams for one run.

    Separate streams (corpus, init, batches, noise, eval) keep every run a
    pure function of the config.
    """

    def __init__(self, config: ExperimentConfig, sampler=None, eval_data=None):
        """``sampler(rng, batch_size) -> (x, y)`` replaces the synthetic corpus
        as the source of training batches; ``eval_data`` is an ``(x, y)`` pair
        used instead of the held-out synthetic batch."""
        self.config = cfg = config.validate()
        corpus_rng, init_rng, self.batch_rng, self.noise_rng, eval_rng = _streams(cfg.seed, 5)
        c = cfg.corpus
        self.corpus = SyntheticCorpusSpec.make(
            corpus_rng, c.n_clusters, cfg.d_model, c.zipf_s, c.noise_std, c.cluster_scale, c.target_scale,
            c.offset_scale, c.target_noise,
        )
        self.model: MoEModel = build_model(
            init_rng, router=cfg.router, n_layers=cfg.n_layers, d_model=cfg.d_model, d_ff=cfg.d_ff,
            n_experts=cfg.n_experts, k=cfg.top_k, d_latent=cfg.d_latent, metric=cfg.metric_kind(),
            lpr_config=cfg.lpr_config(), init=cfg.init, unit_ball=cfg.unit_ball, aux_coef=cfg.aux_coef,
            vanilla_init_std=cfg.vanilla_init_std, init_log_var=cfg.init_log_var,
        )
        self.sampler = sampler or (lambda rng, b: generate_batch(self.corpus, rng, b)[:2])
        if eval_data is None:
            self.eval_x, self.eval_y, _ = generate_batch(self.corpus, eval_rng, cfg.eval_batch_size)
        else:
            self.eval_x, self.eval_y = eval_data
        self.schedule = LrSchedule.from_config(cfg.schedule, cfg.steps)
        self.opt = OptimizerState.from_config(cfg.optimizer)
        self.params = self.model.arrays()
        self.no_decay = self.model.no_decay()
        self.step_count = 0

    def evaluate(self) -> EvalResult:
        fp = self.model.forward(self.eval_x, self.eval_y, train=False)
        hard = np.stack([accumulate_loads([d], "hard-count") for d in fp.decisions])
        soft = np.stack([accumulate_loads([d], "soft-prob") for d in fp.decisions])
        return EvalResult(self.step_count, fp.task_loss, hard, soft)

    def train_step(self) -> StepRecord:
        cfg = self.config
        t = self.step_count
        x, y = self.sampler(self.batch_rng, cfg.batch_size)
        fp = self.model.forward(x, y, rng=self.noise_rng, train=True)
        if not np.isfinite(fp.loss):
            raise TrainingError("non-finite loss", t)
        grads = self.model.backward(fp)
        lr = lr_at(self.schedule, t + 1)
        norm = global_norm(grads)
        step(self.params, grads, self.opt, lr, self.no_decay, after=self.model.project)
        if cfg.ema_enabled:
            self._ema(fp)
        self.step_count += 1
        losses = fp.mean_losses()
        loads = [accumulate_loads([d], "hard-count") for d in fp.decisions]
        return StepRecord(
            t + 1, lr, fp.task_loss, losses["kl"], losses["diversity"], losses["alignment"], fp.loss,
            [gini(l) for l in loads], [min_max_ratio(l) for l in loads], norm,
        )

    def _ema(self, fp) -> None:
        for layer, rp in zip(self.model.layers, fp.router_passes):
            if isinstance(layer.router, LatentPrototypeRouter):
                protos = layer.router.prototypes
                new = ema_update(protos, rp.latents.z, rp.decision, self.config.ema_decay, self.config.ema_mode)
                protos.means[...] = new.means

    def run(self, steps: Optional[int] = None) -> Iterator[StepRecord]:
        n = self.config.steps if steps is None else steps
        for _ in range(n):
            yield self.train_step()


def train(config: ExperimentConfig) -> Iterator[StepRecord]:
    """Train from scratch and yield one record per optimizer step."""
    yield from Trainer(config).run()
