"""Residual stack of routed MoE layers trained on a regression target.

``h_{l+1} = h_l + MoE_l(h_l)``; the prediction is the last hidden state and
the task loss is its mean squared error against the targets. Router
regularizers (and the optional auxiliary balance loss) are averaged over
layers before entering the objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .moe import ExpertBank, MoEOutput, aux_balance_grad, aux_balance_loss, moe_backward, moe_forward, mse
from .router import Detached, LatentPrototypeRouter, RouterPass, VanillaRouter


@dataclass
class MoELayer:
    router: object  # LatentPrototypeRouter | VanillaRouter
    experts: ExpertBank

    def arrays(self) -> dict:
        out = {f"router.{k}": v for k, v in self.router.arrays().items()}
        out.update({f"experts.{k}": v for k, v in self.experts.arrays().items()})
        return out


@dataclass
class ForwardPass:
    loss: float
    task_loss: float
    reg_loss: float
    aux_loss: float
    prediction: np.ndarray
    router_passes: list
    expert_outputs: list
    targets: Optional[np.ndarray] = None
    eps: list = field(default_factory=list)

    @property
    def decisions(self):
        return [rp.decision for rp in self.router_passes]

    def detached(self):
        return [rp.detached for rp in self.router_passes]

    def mean_losses(self):
        """Per-component router losses averaged over layers."""
        n = len(self.router_passes)
        keys = ("kl", "diversity", "alignment", "total_reg")
        return {k: sum(getattr(rp.losses, k) for rp in self.router_passes) / n for k in keys}


class MoEModel:
    """A stack of :class:`MoELayer` with analytic gradients for every array."""

    def __init__(self, layers, aux_coef: float = 0.0, use_reg: bool = True):
        self.layers = list(layers)
        self.aux_coef = float(aux_coef)
        self.use_reg = use_reg

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def arrays(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update({f"layer{i}.{k}": v for k, v in layer.arrays().items()})
        return out

    def no_decay(self) -> set:
        names = set()
        for i, layer in enumerate(self.layers):
            names |= {f"layer{i}.router.{k}" for k in layer.router.no_decay()}
            names |= {f"layer{i}.experts.{k}" for k in ("b_in", "b_out")}
        return names

    def prototype_means(self) -> list:
        return [l.router.prototypes.means for l in self.layers if isinstance(l.router, LatentPrototypeRouter)]

    def project(self) -> None:
        for layer in self.layers:
            layer.router.project()

    def forward(self, x, targets=None, rng=None, train=True, eps=None, detached=None) -> ForwardPass:
        """Run every layer. ``eps`` and ``detached`` (one entry per layer)
        pin the sampling noise and the stop-gradient values, which is how the
        finite-difference checks reproduce a training pass exactly."""
        h = np.asarray(x, dtype=np.float64)
        n = self.n_layers
        rps, outs, used_eps = [], [], []
        reg = aux = 0.0
        for i, layer in enumerate(self.layers):
            rp = layer.router.forward(
                h, rng=rng, train=train,
                eps=None if eps is None else eps[i],
                detached=None if detached is None else detached[i],
            )
            out = moe_forward(layer.experts, rp.decision, h)
            h = h + out.y
            rps.append(rp)
            outs.append(out)
            used_eps.append(None if rp.latents is None else rp.latents.eps)
            reg += rp.losses.total_reg / n
            if self.aux_coef:
                aux += aux_balance_loss(rp.decision) / n
        task = mse(h, targets) if targets is not None else float("nan")
        loss = task + (reg if self.use_reg else 0.0) + self.aux_coef * aux
        return ForwardPass(loss, task, reg, aux, h, rps, outs, targets, used_eps)

    def backward(self, fp: ForwardPass) -> dict:
        """Gradient of ``fp.loss`` for every array in :meth:`arrays`."""
        n = self.n_layers
        g_h = 2.0 * (fp.prediction - fp.targets) / fp.prediction.size
        grads = {}
        reg_scale = (1.0 / n) if self.use_reg else 0.0
        for i in reversed(range(n)):
            layer = self.layers[i]
            rp: RouterPass = fp.router_passes[i]
            out: MoEOutput = fp.expert_outputs[i]
            e_grads, g_gates, g_x_e = moe_backward(layer.experts, out, g_h)
            g_probs = None
            if self.aux_coef:
                g_probs = (self.aux_coef / n) * aux_balance_grad(rp.decision)
            r_grads, g_x_r = layer.router.backward(rp, g_gates=g_gates, g_probs=g_probs, reg_scale=reg_scale)
            grads.update({f"layer{i}.router.{k}": v for k, v in r_grads.items()})
            grads.update({f"layer{i}.experts.{k}": v for k, v in e_grads.items()})
            g_h = g_h + g_x_e + g_x_r
        return grads


def build_model(rng, *, router="lpr", n_layers=1, d_model=32, d_ff=64, n_experts=32, k=4,
                d_latent=16, metric=None, lpr_config=None, init="hyperspherical", unit_ball=True,
                aux_coef=0.0, vanilla_init_std=None, init_log_var=0.0, expert_out_scale=1.0) -> MoEModel:
    layers = []
    for _ in range(n_layers):
        if router == "lpr":
            r = LatentPrototypeRouter.create(
                rng, d_model, d_latent, n_experts, k, metric=metric, config=lpr_config,
                init=init, unit_ball=unit_ball, init_log_var=init_log_var,
            )
        elif router in ("vanilla", "vanilla_aux"):
            r = VanillaRouter.create(rng, d_model, n_experts, k, init_std=vanilla_init_std)
        else:
            raise ValueError(f"unknown router kind {router!r}")
        layers.append(MoELayer(r, ExpertBank.create(rng, n_experts, d_model, d_ff, expert_out_scale)))
    return MoEModel(layers, aux_coef=aux_coef if router == "vanilla_aux" else 0.0)
