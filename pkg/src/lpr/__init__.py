"""Latent prototype routing for mixture-of-experts layers, in NumPy."""

from .balance import LoadStats, accumulate_loads, gini, min_max_ratio
from .config import ConfigError, ExperimentConfig, load_config, parse_config, serialize_config
from .estimator import MoERegressor
from .experiment import ResultRow, RunSummary, emit_heatmap, run_experiment, run_grid
from .metrics import DiagGaussian, MetricKind, score_matrix
from .model import MoEModel, build_model
from .router import LatentPrototypeRouter, LprConfig, VanillaRouter
from .trainer import Trainer, TrainingError, lr_at, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DiagGaussian", "ExperimentConfig", "LatentPrototypeRouter", "LoadStats", "LprConfig",
    "MetricKind", "MoEModel", "MoERegressor", "ResultRow", "RunSummary", "Trainer", "TrainingError",
    "VanillaRouter", "accumulate_loads", "build_model", "emit_heatmap", "gini", "load_config", "lr_at",
    "min_max_ratio", "parse_config", "run_experiment", "run_grid", "score_matrix", "serialize_config", "train",
]
