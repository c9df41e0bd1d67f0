"""Experiment configuration: JSON schema, defaults, validation, hashing.

A config document is a JSON object. Every key is optional; omitted keys take
the defaults below. Unknown keys are rejected. Three keys hold nested
objects: ``corpus``, ``schedule`` and ``optimizer``.

Top-level keys
--------------
router            "lpr" | "vanilla" | "vanilla_aux"                 ("lpr")
metric            cosine | gaussian_kernel | multihead_dot | mahalanobis |
                  wasserstein2 | kl | js | hellinger                ("cosine")
kernel_sigma      bandwidth of gaussian_kernel                      (1.0)
heads             head count of multihead_dot                       (4)
encoder           "variational" | "deterministic"                   ("variational")
d_model, d_ff     token width / expert hidden width                 (32, 64)
d_latent          router latent width                               (16)
n_experts, top_k  experts per layer / experts per token             (128, 8)
n_layers          routed layers in the residual stack               (2)
beta_rs           global regularization scale                       (0.01)
beta_div, beta_align, beta_kl                                       (1.0, 0.05, 0.01)
diversity         orthogonal | cosine | euclidean                   ("orthogonal")
diversity_target  "prototypes" | "tokens" | "both"                  ("both")
init              hyperspherical | gaussian | orthogonal            ("hyperspherical")
unit_ball         project prototype means into the unit ball        (true)
ema_enabled, ema_decay, ema_mode                                    (false, 0.9, "hard")
aux_coef          balance-loss weight for router "vanilla_aux"      (0.001)
vanilla_init_std  std of vanilla expert keys; null = 1/sqrt(d_model) (null)
init_log_var      initial encoder log-variance bias                 (0.0)
batch_size, eval_batch_size                                         (128, 4096)
seed, steps, eval_every                                             (0, 1000, 100)

corpus:    n_clusters (16), zipf_s (1.0), noise_std (0.3), cluster_scale (1.0),
           target_scale (1.0), offset_scale (2.0), target_noise (0.5)
schedule:  base_lr (1e-3), min_lr_ratio (0.05), warmup_frac (0.05),
           stable_frac (0.70), decay_frac (0.25)
optimizer: beta1 (0.9), beta2 (0.95), eps (1e-8), weight_decay (0.1),
           clip_norm (1.0)
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields

from .metrics import METRIC_TAGS, MetricKind
from .router import DIVERSITY_KINDS, DIVERSITY_TARGETS, INIT_KINDS, LprConfig

ROUTERS = ("lpr", "vanilla", "vanilla_aux")


class ConfigError(ValueError):
    """Invalid config document. ``key`` names the offending key when known."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None, column: int | None = None):
        super().__init__(message)
        self.key = key
        self.line = line
        self.column = column


@dataclass
class CorpusConfig:
    n_clusters: int = 16
    zipf_s: float = 1.0
    noise_std: float = 0.3
    cluster_scale: float = 1.0
    target_scale: float = 1.0
    offset_scale: float = 2.0
    target_noise: float = 0.5


@dataclass
class ScheduleConfig:
    base_lr: float = 1e-3
    min_lr_ratio: float = 0.05
    warmup_frac: float = 0.05
    stable_frac: float = 0.70
    decay_frac: float = 0.25


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0


@dataclass
class ExperimentConfig:
    router: str = "lpr"
    metric: str = "cosine"
    kernel_sigma: float = 1.0
    heads: int = 4
    encoder: str = "variational"
    d_model: int = 32
    d_ff: int = 64
    d_latent: int = 16
    n_experts: int = 128
    top_k: int = 8
    n_layers: int = 2
    beta_rs: float = 0.01
    beta_div: float = 1.0
    beta_align: float = 0.05
    beta_kl: float = 0.01
    diversity: str = "orthogonal"
    diversity_target: str = "both"
    init: str = "hyperspherical"
    unit_ball: bool = True
    ema_enabled: bool = False
    ema_decay: float = 0.9
    ema_mode: str = "hard"
    aux_coef: float = 1e-3
    vanilla_init_std: float | None = None
    init_log_var: float = 0.0
    batch_size: int = 128
    eval_batch_size: int = 4096
    seed: int = 0
    steps: int = 1000
    eval_every: int = 100
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def validate(self) -> "ExperimentConfig":
        def bad(key, msg):
            raise ConfigError(f"{key}: {msg}", key=key)

        choices = {
            "router": ROUTERS, "metric": METRIC_TAGS, "encoder": ("variational", "deterministic"),
            "diversity": DIVERSITY_KINDS, "diversity_target": DIVERSITY_TARGETS,
            "init": INIT_KINDS, "ema_mode": ("hard", "soft"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                bad(key, f"must be one of {list(allowed)}, got {getattr(self, key)!r}")
        for key in ("d_model", "d_ff", "d_latent", "n_experts", "top_k", "n_layers", "heads", "batch_size", "eval_batch_size"):
            if getattr(self, key) < 1:
                bad(key, "must be >= 1")
        for key in ("steps", "eval_every", "seed"):
            if getattr(self, key) < 0:
                bad(key, "must be >= 0")
        if self.top_k > self.n_experts:
            bad("top_k", "k must not exceed M (n_experts)")
        if self.d_latent > self.d_model:
            bad("d_latent", "must not exceed d_model")
        if self.metric == "multihead_dot" and self.d_latent % self.heads:
            bad("heads", "must divide d_latent")
        if not self.kernel_sigma > 0:
            bad("kernel_sigma", "must be > 0")
        for key in ("beta_rs", "beta_div", "beta_align", "beta_kl", "aux_coef"):
            if getattr(self, key) < 0:
                bad(key, "must be >= 0")
        if not 0.0 <= self.ema_decay <= 1.0:
            bad("ema_decay", "must lie in [0, 1]")
        if self.vanilla_init_std is not None and not self.vanilla_init_std > 0:
            bad("vanilla_init_std", "must be > 0 or null")
        c = self.corpus
        if c.n_clusters < 1:
            bad("corpus.n_clusters", "must be >= 1")
        if c.zipf_s < 0:
            bad("corpus.zipf_s", "must be >= 0")
        for key in ("noise_std", "cluster_scale", "target_scale", "offset_scale", "target_noise"):
            if getattr(c, key) < 0:
                bad(f"corpus.{key}", "must be >= 0")
        s = self.schedule
        for key in ("warmup_frac", "stable_frac", "decay_frac", "min_lr_ratio"):
            if not 0.0 <= getattr(s, key) <= 1.0:
                bad(f"schedule.{key}", "must lie in [0, 1]")
        if not math.isclose(s.warmup_frac + s.stable_frac + s.decay_frac, 1.0, abs_tol=1e-9):
            bad("schedule", "warmup_frac + stable_frac + decay_frac must sum to 1")
        if s.base_lr < 0:
            bad("schedule.base_lr", "must be >= 0")
        o = self.optimizer
        for key in ("beta1", "beta2"):
            if not 0.0 <= getattr(o, key) < 1.0:
                bad(f"optimizer.{key}", "must lie in [0, 1)")
        if o.eps <= 0 or o.clip_norm <= 0 or o.weight_decay < 0:
            bad("optimizer", "eps and clip_norm must be > 0, weight_decay >= 0")
        return self

    # -- derived pieces --

    def metric_kind(self) -> MetricKind:
        return MetricKind(self.metric, sigma=self.kernel_sigma, heads=self.heads if self.metric == "multihead_dot" else 1)

    def lpr_config(self) -> LprConfig:
        return LprConfig(self.beta_rs, self.beta_div, self.beta_align, self.beta_kl,
                         self.diversity, self.diversity_target, self.encoder)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with top-level or dotted (``corpus.zipf_s``) keys changed."""
        data = self.to_dict()
        for key, value in changes.items():
            key = key.replace("__", ".")
            if "." in key:
                section, sub = key.split(".", 1)
                data[section][sub] = value
            else:
                data[key] = value
        return from_dict(data)


_SECTIONS = {"corpus": CorpusConfig, "schedule": ScheduleConfig, "optimizer": OptimizerConfig}


def _coerce(key, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}", key=key)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{key}: expected an integer, got {value!r}", key=key)
        return value
    if isinstance(default, float) or default is None:
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}", key=key)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}", key=key)
        return value
    return value


def _build(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'document'}: expected a JSON object", key=prefix.rstrip(".") or None)
    defaults = cls()
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        key = prefix + unknown[0]
        raise ConfigError(f"{key}: unknown key", key=key)
    kwargs = {}
    for name, value in data.items():
        key = prefix + name
        if name in _SECTIONS and cls is ExperimentConfig:
            kwargs[name] = _build(_SECTIONS[name], value, key + ".")
        else:
            kwargs[name] = _coerce(key, value, getattr(defaults, name))
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, copy.deepcopy(data)).validate()


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a JSON config document; empty text means all defaults."""
    if not text.strip():
        return ExperimentConfig().validate()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}",
                          line=exc.lineno, column=exc.colno) from None
    return from_dict(data)


def serialize_config(cfg: ExperimentConfig) -> str:
    return cfg.to_json()


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
