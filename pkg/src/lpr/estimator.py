"""scikit-learn style wrapper around the routed residual MoE.

The model is residual (``h + MoE(h)``), so targets must have the same width
as the inputs.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .balance import accumulate_loads, gini, min_max_ratio
from .config import ExperimentConfig
from .trainer import Trainer


class MoERegressor(RegressorMixin, TransformerMixin, BaseEstimator):
    """Fit a routed MoE regressor on ``(X, y)`` with ``y.shape == X.shape``.

    ``transform`` returns the first layer's routing probabilities, one column
    per expert. Remaining training options (betas, schedule, optimizer) can
    be passed as a dict in ``config_overrides`` using config key names.
    """

    def __init__(self, router="lpr", metric="cosine", n_experts=32, top_k=4, d_latent=16, n_layers=1,
                 d_ff=64, steps=1000, batch_size=128, base_lr=1e-3, config_overrides=None, random_state=0):
        self.router = router
        self.metric = metric
        self.n_experts = n_experts
        self.top_k = top_k
        self.d_latent = d_latent
        self.n_layers = n_layers
        self.d_ff = d_ff
        self.steps = steps
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.config_overrides = config_overrides
        self.random_state = random_state

    def _config(self, d_model: int) -> ExperimentConfig:
        changes = dict(
            router=self.router, metric=self.metric, n_experts=self.n_experts, top_k=self.top_k,
            d_latent=min(self.d_latent, d_model), n_layers=self.n_layers, d_ff=self.d_ff, d_model=d_model,
            steps=self.steps, batch_size=self.batch_size, seed=int(self.random_state or 0),
        )
        changes["schedule.base_lr"] = self.base_lr
        changes.update(self.config_overrides or {})
        return ExperimentConfig().replace(**changes)

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True, dtype=np.float64)
        y = y.reshape(len(y), -1)
        if y.shape != X.shape:
            raise ValueError(f"targets must match the input shape {X.shape}, got {y.shape}")
        self.n_features_in_ = X.shape[1]
        self.config_ = self._config(X.shape[1])

        def sampler(rng, b):
            idx = rng.integers(0, len(X), size=b)
            return X[idx], y[idx]

        trainer = Trainer(self.config_, sampler=sampler, eval_data=(X, y))
        self.history_ = [rec.task_loss for rec in trainer.run()]
        self.model_ = trainer.model
        return self

    def _forward(self, X, y=None):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the model was fitted on {self.n_features_in_}")
        return self.model_.forward(X, y, train=False)

    def predict(self, X):
        return self._forward(X).prediction

    def transform(self, X):
        return self._forward(X).router_passes[0].decision.probs

    def route(self, X) -> np.ndarray:
        """Top-k expert indices per token for every layer, shape (layers, n, k)."""
        return np.stack([d.topk_idx for d in self._forward(X).decisions])

    def load_balance(self, X) -> dict:
        """Mean per-layer Gini and min-max ratio of the hard loads on ``X``."""
        loads = [accumulate_loads([d], "hard-count") for d in self._forward(X).decisions]
        return {"gini": float(np.mean([gini(l) for l in loads])),
                "min_max": float(np.mean([min_max_ratio(l) for l in loads]))}
