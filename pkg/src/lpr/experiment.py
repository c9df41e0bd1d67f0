"""Single runs, ablation grids and their on-disk artifacts.

A run writes three files into its output directory:

``results.csv``
    one row per evaluation point (columns in :data:`RESULT_COLUMNS`);
``summary.json``
    config, config hash, status and the final metrics;
``heatmap.tsv``
    the final hard loads as a layers x experts matrix, each row summing to 1.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig
from .trainer import EvalResult, Trainer, TrainingError

RESULT_COLUMNS = (
    "config_hash", "step", "test_loss", "gini_hard", "gini_soft",
    "min_max_hard", "min_max_soft", "loads_hard",
)
GRID_AXES = ("latent_dim", "reg_strength", "nk_setting", "diversity_kind", "metric_kind")
GRID_COLUMNS = (
    "axis", "value", "test_loss", "gini_hard", "min_max_hard", "gini_soft", "min_max_soft",
    "seeds", "diverged",
)


def _fmt(x) -> str:
    """Floats are written with 12 significant digits so files stay diffable."""
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.12g}"
    return str(x)


@dataclass
class ResultRow:
    config_hash: str
    step: int
    test_loss: float
    gini_hard: float
    gini_soft: float
    min_max_hard: float
    min_max_soft: float
    loads_hard: list  # per layer, per expert token counts

    @classmethod
    def from_eval(cls, config_hash: str, ev: EvalResult) -> "ResultRow":
        return cls(
            config_hash, ev.step, float(ev.test_loss), ev.gini_hard, ev.gini_soft,
            ev.min_max_hard, ev.min_max_soft, ev.loads_hard.astype(int).tolist(),
        )

    @classmethod
    def diverged(cls, config_hash: str, step: int) -> "ResultRow":
        nan = float("nan")
        return cls(config_hash, step, nan, nan, nan, nan, nan, [])

    def as_csv(self) -> list:
        out = [_fmt(getattr(self, c)) for c in RESULT_COLUMNS[:-1]]
        out.append(json.dumps(self.loads_hard, separators=(",", ":")))
        return out


@dataclass
class RunSummary:
    config_hash: str
    status: str  # "ok" | "diverged"
    steps_completed: int
    final: Optional[ResultRow]
    error: Optional[str] = None
    rows: list = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self, config: Optional[ExperimentConfig] = None) -> dict:
        out = {
            "config_hash": self.config_hash,
            "status": self.status,
            "steps_completed": self.steps_completed,
            "error": self.error,
            "final": None if self.final is None else asdict(self.final),
        }
        if config is not None:
            out["config"] = config.to_dict()
        return out


def normalized_loads(loads) -> np.ndarray:
    """Scale each layer's load row to sum to 1 (all-zero rows stay zero)."""
    loads = np.atleast_2d(np.asarray(loads, dtype=np.float64))
    totals = loads.sum(axis=1, keepdims=True)
    return np.divide(loads, totals, out=np.zeros_like(loads), where=totals > 0)


def emit_heatmap(loads, path) -> np.ndarray:
    """Write per-layer normalized loads as TSV (header ``layer e0 e1 ...``)."""
    mat = normalized_loads(loads)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["layer"] + [f"e{i}" for i in range(mat.shape[1])])
        for i, row in enumerate(mat):
            w.writerow([i] + [f"{v:.12g}" for v in row])
    return mat


def read_heatmap(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def _eval_points(steps: int, every: int) -> set:
    pts = set(range(every, steps + 1, every)) if every else set()
    pts.add(steps)
    return pts


def run_experiment(config: ExperimentConfig, out_dir=None, on_row: Optional[Callable] = None) -> RunSummary:
    """Train one model, evaluating at step 0, every ``eval_every`` steps and
    at the end. A non-finite loss or gradient stops the run and is reported
    as ``status == "diverged"`` together with a NaN diagnostic row."""
    config = config.validate()
    h = config.config_hash()
    trainer = Trainer(config)
    rows: list[ResultRow] = []
    points = _eval_points(config.steps, config.eval_every)

    def record(row):
        rows.append(row)
        if on_row is not None:
            on_row(row)

    last_eval = trainer.evaluate()
    record(ResultRow.from_eval(h, last_eval))
    status, error = "ok", None
    try:
        for rec in trainer.run():
            if rec.step in points and rec.step > 0:
                last_eval = trainer.evaluate()
                if not np.isfinite(last_eval.test_loss):
                    raise TrainingError("non-finite test loss", rec.step)
                record(ResultRow.from_eval(h, last_eval))
    except TrainingError as exc:
        status, error = "diverged", str(exc)
        record(ResultRow.diverged(h, exc.step))

    final = rows[-1] if status == "ok" else None
    summary = RunSummary(h, status, trainer.step_count, final, error, rows)
    if out_dir is not None:
        write_run(out_dir, config, summary, last_eval.loads_hard)
    return summary


def write_run(out_dir, config: ExperimentConfig, summary: RunSummary, loads) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for row in summary.rows:
            w.writerow(row.as_csv())
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary.to_dict(config), fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")
    emit_heatmap(loads, out / "heatmap.tsv")


# --- ablation grids --------------------------------------------------------


def parse_nk(value) -> tuple[int, int, bool]:
    """``"64-4"`` -> (64, 4, False); ``"64-1-noreg"`` -> (64, 1, True)."""
    if isinstance(value, (tuple, list)):
        m, k = value[:2]
        return int(m), int(k), bool(value[2]) if len(value) > 2 else False
    parts = str(value).replace(" ", "").split("-")
    try:
        m, k = int(parts[0]), int(parts[1])
    except (IndexError, ValueError):
        raise ConfigError(f"nk_setting: cannot parse {value!r}, expected 'M-k' or 'M-k-noreg'", key="nk_setting")
    tail = "-".join(parts[2:]).lower()
    if tail not in ("", "noreg"):
        raise ConfigError(f"nk_setting: unknown suffix {tail!r}", key="nk_setting")
    return m, k, tail == "noreg"


def apply_axis(base: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "latent_dim":
        return base.replace(d_latent=int(value))
    if axis == "reg_strength":
        return base.replace(beta_rs=float(value))
    if axis == "nk_setting":
        m, k, noreg = parse_nk(value)
        changes = {"n_experts": m, "top_k": k}
        if noreg:
            changes["beta_rs"] = 0.0
        return base.replace(**changes)
    if axis == "diversity_kind":
        return base.replace(diversity=str(value))
    if axis == "metric_kind":
        return base.replace(metric=str(value))
    raise ConfigError(f"axis: must be one of {list(GRID_AXES)}, got {axis!r}", key="axis")


@dataclass
class GridRow:
    axis: str
    value: str
    test_loss: float
    gini_hard: float
    min_max_hard: float
    gini_soft: float
    min_max_soft: float
    seeds: str
    diverged: int

    def as_csv(self) -> list:
        return [_fmt(getattr(self, c)) for c in GRID_COLUMNS]


def _mean(xs) -> float:
    return float(np.mean(xs)) if xs else float("nan")


def run_grid(base: ExperimentConfig, axis: str, values: Sequence, seeds: Optional[Iterable[int]] = None,
             out_dir=None) -> list[GridRow]:
    """One row per axis value, metrics averaged over ``seeds``.

    Every cell uses the same seeds, so cells see the same corpus and batch
    order and differ only in the swept setting. Diverged cells are counted
    and excluded from the means; the grid carries on.
    """
    seeds = [base.seed] if seeds is None else [int(s) for s in seeds]
    cells = [(v, apply_axis(base, axis, v)) for v in values]  # validate all before running
    rows = []
    for value, cfg in cells:
        finals, diverged = [], 0
        for seed in seeds:
            cell_cfg = cfg.replace(seed=seed)
            sub = None if out_dir is None else os.path.join(out_dir, f"{axis}={value}", f"seed{seed}")
            summary = run_experiment(cell_cfg, sub)
            if summary.ok:
                finals.append(summary.final)
            else:
                diverged += 1
        rows.append(GridRow(
            axis, str(value),
            _mean([f.test_loss for f in finals]),
            _mean([f.gini_hard for f in finals]),
            _mean([f.min_max_hard for f in finals]),
            _mean([f.gini_soft for f in finals]),
            _mean([f.min_max_soft for f in finals]),
            ",".join(map(str, seeds)), diverged,
        ))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_grid(Path(out_dir) / "grid.csv", rows)
    return rows


def write_grid(path, rows: Sequence[GridRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for r in rows:
            w.writerow(r.as_csv())
