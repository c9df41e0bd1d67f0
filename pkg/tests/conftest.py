import numpy as np
import pytest

from lpr.metrics import MetricKind
from lpr.model import build_model
from lpr.numerics import finite_diff_grad, make_rng, relative_error
from lpr.router import LprConfig


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def accept(request):
    """``accept(criterion, part, ok, detail)`` records one checked clause of an
    acceptance criterion for the end-of-run summary."""
    table = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(criterion, part, ok, detail=""):
        table.setdefault(criterion, []).append((part, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(ACCEPTANCE, None)
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(table):
        parts = table[criterion]
        status = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{part} {'ok' if ok else 'FAILED'}{': ' + d if d else ''}" for part, ok, d in parts)
        terminalreporter.write_line(f"{criterion} {status}  {detail}")


def small_model(metric="cosine", diversity="orthogonal", target="prototypes", router="lpr",
                mode="variational", n_layers=2, aux=0.0, betas=(0.7, 1.0, 0.8, 0.9), seed=3):
    """The d_model=8, d_latent=4, M=6 instance used by every gradient check.

    Large betas make the regularizer gradients comparable to the task term,
    and random prototype/encoder log-variances move every path off its
    symmetric starting point.
    """
    rng = make_rng(seed)
    kind = MetricKind(metric, sigma=1.5, heads=2)
    cfg = LprConfig(*betas, diversity=diversity, diversity_target=target, encoder_mode=mode)
    model = build_model(rng, router=router, n_layers=n_layers, d_model=8, d_ff=7, n_experts=6, k=2,
                        d_latent=4, metric=kind, lpr_config=cfg, unit_ball=False, aux_coef=aux)
    for layer in model.layers:
        r = layer.router
        if hasattr(r, "prototypes"):
            r.prototypes.log_vars[:] = 0.3 * rng.standard_normal(r.prototypes.log_vars.shape)
            if r.encoder.b_lv is not None:
                r.encoder.b_lv[:] = 0.2 * rng.standard_normal(r.encoder.b_lv.shape)
    x = rng.standard_normal((5, 8))
    y = rng.standard_normal((5, 8))
    return model, x, y, rng


def model_grad_errors(model, x, y, rng, names=None):
    """Relative error between analytic and central-difference gradients for
    every array (or those in ``names``). The base pass's noise and detached
    values are replayed so the objective is a fixed function of parameters."""
    fp = model.forward(x, y, rng=rng)
    grads = model.backward(fp)
    eps, det = fp.eps, fp.detached()
    errors = {}
    for name, arr in model.arrays().items():
        if names is not None and name not in names:
            continue

        def f(v, arr=arr):
            old = arr.copy()
            arr[...] = v
            val = model.forward(x, y, eps=eps, detached=det).loss
            arr[...] = old
            return val

        errors[name] = relative_error(grads[name], finite_diff_grad(f, arr))
    return errors
