import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lpr.metrics import METRIC_TAGS, MetricKind, score_matrix
from lpr.numerics import ShapeError, finite_diff_grad, make_rng, relative_error, rms_norm, silu
from lpr.router import (
    DIVERSITY_KINDS, ContractError, Detached, EncoderParams, ExpertPrototypes, LatentPrototypeRouter,
    Latents, LprConfig, alignment_loss, alignment_loss_grad, decide, diversity_loss, diversity_loss_and_grad,
    ema_update, encode, gaussian_init, hyperspherical_init, init_encoder, kl_loss, lpr_losses_and_grads,
    orthogonal_init, route, vanilla_route,
)

from conftest import model_grad_errors, small_model


# --- encoder -------------------------------------------------------------


def test_encode_matches_composed_ops():
    r = make_rng(21)
    p = init_encoder(r, 8, 4, variational=True, init_log_var=-0.5)
    x = r.normal(size=(3, 8))
    lat = encode(p, x, mode="variational-eval")
    h = np.zeros((3, 8))
    for t in range(3):
        row = rms_norm(x[t])
        h[t] = [silu(v) for v in row]
    np.testing.assert_allclose(lat.mean, h @ p.w1 + p.b1, atol=1e-12)
    np.testing.assert_array_equal(lat.z, lat.mean)


def test_encode_zero_input_gives_bias():
    p = init_encoder(make_rng(0), 6, 3, variational=False)
    assert np.all(encode(p, np.zeros((2, 6)), mode="deterministic").z == 0.0)


def test_variational_sampling_uses_eps_and_collapses_with_small_variance():
    r = make_rng(22)
    p = init_encoder(r, 6, 3, variational=True, init_log_var=-10.0)
    x = r.normal(size=(4, 6))
    eps = r.normal(size=(4, 3))
    lat = encode(p, x, mode="variational", eps=eps)
    np.testing.assert_allclose(lat.z, lat.mean + np.exp(0.5 * lat.log_var) * eps)
    assert np.max(np.abs(lat.z - lat.mean)) < 0.05


def test_encode_errors():
    p = init_encoder(make_rng(0), 6, 3, variational=False)
    with pytest.raises(ShapeError):
        encode(p, np.zeros((2, 5)), mode="deterministic")
    with pytest.raises(ContractError):
        encode(p, np.zeros((2, 6)), mode="variational", rng=make_rng(0))
    with pytest.raises(ShapeError):
        EncoderParams(np.zeros((3, 4)), np.zeros(4))


# --- losses ----------------------------------------------------------------


def _lat(mean, log_var):
    mean = np.atleast_2d(mean).astype(float)
    return Latents(mean, np.atleast_2d(log_var).astype(float), mean)


def test_kl_examples():
    assert kl_loss(_lat(np.zeros((3, 2)), np.zeros((3, 2)))) == 0.0
    assert kl_loss(_lat([[1.0]], [[0.0]])) == pytest.approx(0.5, abs=1e-15)
    one = _lat([[0.3, -1.0]], [[0.2, -0.4]])
    two = _lat([[0.3, -1.0]] * 2, [[0.2, -0.4]] * 2)
    assert kl_loss(one) == pytest.approx(kl_loss(two), abs=1e-15)
    with pytest.raises(ContractError):
        kl_loss(Latents(np.zeros((1, 2)), None, np.zeros((1, 2))))


def test_diversity_examples():
    assert diversity_loss(np.eye(3), "orthogonal") == pytest.approx(0.0, abs=1e-15)
    assert diversity_loss(np.array([[1.0, 0.0], [1.0, 0.0]]), "orthogonal") == pytest.approx(2.0, abs=1e-12)
    assert diversity_loss(np.eye(4), "cosine") == 0.0
    assert diversity_loss(np.ones((1, 3)), "euclidean") == 0.0
    # identical rows: every off-diagonal exp(-0) = 1
    assert diversity_loss(np.ones((3, 2)), "euclidean") == pytest.approx(1.0)


@pytest.mark.parametrize("kind", DIVERSITY_KINDS)
def test_diversity_gradient(kind):
    t = make_rng(23).normal(size=(5, 3))
    value, grad = diversity_loss_and_grad(t, kind)
    assert value >= 0
    num = finite_diff_grad(lambda v: diversity_loss(v, kind), t)
    assert relative_error(grad, num) < 1e-8


def test_alignment_examples():
    z = np.array([[0.5, -0.2], [0.5, -0.2]])
    assert alignment_loss(z, np.ones((2, 1)), np.array([[0.5, -0.2]])) == 0.0
    means = np.array([[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]])
    z = means[1:2] + np.array([[1.0, 0.0, 0.0]])
    assert alignment_loss(z, np.array([[0.0, 1.0]]), means) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ShapeError):
        alignment_loss(z, np.array([[1.0]]), means)


def test_alignment_gradient_reaches_prototypes_only():
    r = make_rng(24)
    z, p, means = r.normal(size=(4, 3)), r.dirichlet(np.ones(5), 4), r.normal(size=(5, 3))
    num = finite_diff_grad(lambda m: alignment_loss(z, p, m), means)
    assert relative_error(alignment_loss_grad(z, p, means), num) < 1e-9


# --- routing ---------------------------------------------------------------


def test_decide_matches_sort_and_renormalize_oracle():
    r = make_rng(25)
    s = r.normal(size=(4, 8))
    d = decide(s, 2)
    for t in range(4):
        e = np.exp(s[t] - s[t].max())
        p = e / e.sum()
        order = sorted(range(8), key=lambda j: (-p[j], j))[:2]
        np.testing.assert_array_equal(d.topk_idx[t], order)
        np.testing.assert_allclose(d.topk_w[t], p[order] / p[order].sum(), atol=1e-15)


def test_decide_k_equals_m_and_errors():
    s = make_rng(26).normal(size=(3, 5))
    d = decide(s, 5)
    np.testing.assert_allclose(d.gates(), d.probs, atol=1e-15)
    with pytest.raises(ValueError):
        decide(s, 6)
    with pytest.raises(ValueError):
        decide(s, 0)


def test_ties_go_to_lower_index():
    d = decide(np.zeros((2, 5)), 3)
    np.testing.assert_array_equal(d.topk_idx, [[0, 1, 2], [0, 1, 2]])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-20, 20)), st.integers(1, 6), st.floats(-50, 50))
def test_routing_invariants(scores, k, shift):
    d = decide(scores, k)
    assert d.topk_idx.shape == (4, k)
    assert all(len(set(row)) == k for row in d.topk_idx)
    assert np.all(d.topk_w >= 0)
    np.testing.assert_allclose(d.topk_w.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(d.probs.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(d.mask().sum(axis=1) == k)
    # a per-token constant shift keeps the selection
    shifted = decide(scores + shift, k)
    same_probs = np.allclose(shifted.probs, d.probs, atol=1e-12, rtol=0)
    if same_probs and len(np.unique(np.round(d.probs, 10))) == d.probs.size:
        np.testing.assert_array_equal(shifted.topk_idx, d.topk_idx)


def test_route_picks_matching_prototype():
    protos = ExpertPrototypes(np.eye(5), np.zeros((5, 5)))
    lat = Latents(np.eye(5)[3:4], None, np.eye(5)[3:4])
    assert route(lat, protos, MetricKind("cosine"), 2).topk_idx[0, 0] == 3


def test_vanilla_route_examples():
    q, _ = np.linalg.qr(make_rng(27).normal(size=(8, 8)))
    w = q[:6]
    d = vanilla_route(w[5:6], w, 1)
    assert d.topk_idx[0, 0] == 5 and d.topk_w[0, 0] == 1.0
    with pytest.raises(ShapeError):
        vanilla_route(np.zeros((1, 7)), w, 1)


def test_vanilla_route_equals_single_head_dot_route_without_rescale():
    r = make_rng(28)
    x, w = r.normal(size=(6, 8)), r.normal(size=(5, 8))
    s = score_matrix(x, None, w, None, MetricKind("multihead_dot", heads=1)) * math.sqrt(8)
    a, b = decide(s, 2), vanilla_route(x, w, 2)
    np.testing.assert_array_equal(a.topk_idx, b.topk_idx)
    np.testing.assert_allclose(a.topk_w, b.topk_w, atol=1e-12)


# --- prototypes ------------------------------------------------------------


def test_hyperspherical_init():
    p = hyperspherical_init(make_rng(29), 128, 64)
    np.testing.assert_allclose(np.linalg.norm(p.means, axis=1), 1.0, atol=1e-9)
    assert np.all(p.log_vars == 0)
    c = p.means @ p.means.T
    off = np.abs(c[~np.eye(128, dtype=bool)])
    assert off.mean() < 0.15
    np.testing.assert_array_equal(p.means, hyperspherical_init(make_rng(29), 128, 64).means)


def test_other_inits():
    o = orthogonal_init(make_rng(30), 4, 6)
    np.testing.assert_allclose(o.means @ o.means.T, np.eye(4), atol=1e-12)
    g = gaussian_init(make_rng(30), 10, 6, unit_ball=False)
    assert np.linalg.norm(g.means, axis=1).max() > 1.0


def test_unit_ball_projection():
    p = ExpertPrototypes(np.array([[3.0, 4.0], [0.3, 0.4]]), np.zeros((2, 2)), unit_ball=True)
    p.project()
    np.testing.assert_allclose(p.means, [[0.6, 0.8], [0.3, 0.4]])


# --- EMA -------------------------------------------------------------------


def _decision(probs, idx):
    probs = np.asarray(probs, dtype=float)
    return decide(np.log(probs), len(idx[0]), np.asarray(idx))


def test_ema_identity_and_replacement():
    protos = ExpertPrototypes(np.array([[0.1, 0.2], [0.3, -0.1], [0.0, 0.5]]), np.zeros((3, 2)), unit_ball=False)
    z = np.array([[0.7, -0.3]])
    d = _decision([[0.2, 0.2, 0.6]], [[2]])
    np.testing.assert_array_equal(ema_update(protos, z, d, 1.0).means, protos.means)
    moved = ema_update(protos, z, d, 0.0, "hard")
    np.testing.assert_array_equal(moved.means[2], z[0])
    np.testing.assert_array_equal(moved.means[:2], protos.means[:2])  # no tokens -> untouched
    with pytest.raises(ValueError):
        ema_update(protos, z, d, 1.5)


def test_ema_soft_hand_computed():
    means = np.array([[1.0, 0.0], [0.0, 1.0]])
    protos = ExpertPrototypes(means.copy(), np.zeros((2, 2)), unit_ball=False)
    z = np.array([[2.0, 0.0], [0.0, 4.0]])
    probs = np.array([[0.75, 0.25], [0.5, 0.5]])
    out = ema_update(protos, z, _decision(probs, [[0], [1]]), 0.9, "soft")
    # expert 0: (0.75*[2,0] + 0.5*[0,4]) / 1.25 = [1.2, 1.6]
    # expert 1: (0.25*[2,0] + 0.5*[0,4]) / 0.75 = [2/3, 8/3]
    np.testing.assert_allclose(out.means[0], 0.9 * means[0] + 0.1 * np.array([1.2, 1.6]), atol=1e-15)
    np.testing.assert_allclose(out.means[1], 0.9 * means[1] + 0.1 * np.array([2 / 3, 8 / 3]), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.sampled_from(["hard", "soft"]), st.integers(0, 1000))
def test_ema_fixed_point_and_unit_ball(lam, mode, seed):
    r = make_rng(seed)
    means = r.normal(size=(3, 2))
    means /= np.maximum(np.linalg.norm(means, axis=1, keepdims=True), 1.0)
    idx = np.array([[0], [0], [2]])
    z = means[idx[:, 0]]
    probs = np.eye(3)[idx[:, 0]] * 0.98 + 0.01 / 3 * 2
    probs /= probs.sum(axis=1, keepdims=True)
    d = _decision(probs, idx)
    if mode == "hard":
        out = ema_update(ExpertPrototypes(means.copy(), np.zeros((3, 2))), z, d, lam, mode)
        np.testing.assert_allclose(out.means, means, atol=1e-12)
    far = ema_update(ExpertPrototypes(means.copy(), np.zeros((3, 2))), 10 * r.normal(size=(3, 2)), d, lam, mode)
    assert np.all(np.linalg.norm(far.means, axis=1) <= 1 + 1e-9)


# --- full router gradients ---------------------------------------------------


def test_all_betas_zero_gives_zero_gradients():
    r = make_rng(31)
    router = LatentPrototypeRouter.create(r, 8, 4, 6, 2, config=LprConfig(0.0, 1.0, 1.0, 1.0))
    _, grads = lpr_losses_and_grads(router, r.normal(size=(5, 8)), rng=r)
    for g in grads.values():
        assert np.all(g == 0.0)


def test_beta_rs_scales_gradients_linearly():
    def grads(beta_rs):
        r = make_rng(32)
        router = LatentPrototypeRouter.create(r, 8, 4, 6, 2, config=LprConfig(beta_rs, 1.0, 0.3, 0.2, diversity_target="both"))
        return lpr_losses_and_grads(router, r.normal(size=(5, 8)), rng=r)[1]

    a, b = grads(0.01), grads(0.1)
    for name in a:
        np.testing.assert_allclose(b[name], 10 * a[name], rtol=1e-12, atol=1e-300)


def test_losses_combine_exactly():
    r = make_rng(33)
    cfg = LprConfig(0.01, 1.0, 0.05, 0.01)
    router = LatentPrototypeRouter.create(r, 8, 4, 6, 2, config=cfg)
    losses, _ = lpr_losses_and_grads(router, r.normal(size=(5, 8)), rng=r)
    assert min(losses.kl, losses.diversity, losses.alignment) >= 0
    assert losses.total_reg == cfg.beta_rs * (cfg.beta_div * losses.diversity + cfg.beta_align * losses.alignment + cfg.beta_kl * losses.kl)


def test_alignment_gives_no_encoder_gradient():
    r = make_rng(34)
    router = LatentPrototypeRouter.create(r, 8, 4, 6, 2, config=LprConfig(1.0, 0.0, 1.0, 0.0))
    _, grads = lpr_losses_and_grads(router, r.normal(size=(5, 8)), rng=r)
    for name in ("w1", "b1", "w_lv", "b_lv"):
        assert np.all(grads[name] == 0.0)
    assert np.any(grads["proto_mean"] != 0.0)


def test_kl_gives_no_prototype_gradient():
    r = make_rng(35)
    router = LatentPrototypeRouter.create(r, 8, 4, 6, 2, config=LprConfig(1.0, 0.0, 0.0, 1.0))
    _, grads = lpr_losses_and_grads(router, r.normal(size=(5, 8)), rng=r)
    assert np.all(grads["proto_mean"] == 0.0)
    assert np.any(grads["w1"] != 0.0)


@pytest.mark.parametrize("metric", METRIC_TAGS)
def test_router_gradients_every_metric(metric):
    model, x, y, r = small_model(metric=metric, target="both")
    errs = model_grad_errors(model, x, y, r)
    assert max(errs.values()) < 1e-4, errs


@pytest.mark.parametrize("kind", DIVERSITY_KINDS)
@pytest.mark.parametrize("target", ["prototypes", "tokens", "both"])
def test_router_gradients_every_diversity(kind, target):
    model, x, y, r = small_model(diversity=kind, target=target, n_layers=1)
    errs = model_grad_errors(model, x, y, r)
    assert max(errs.values()) < 1e-4, errs


@pytest.mark.parametrize("metric", ["cosine", "kl"])
def test_deterministic_encoder_gradients(metric):
    model, x, y, r = small_model(metric=metric, mode="deterministic", target="tokens", n_layers=1)
    errs = model_grad_errors(model, x, y, r)
    assert "layer0.router.w_lv" not in errs
    assert max(errs.values()) < 1e-4, errs


def test_prototype_log_var_trainable_only_when_read():
    for tag in METRIC_TAGS:
        router = LatentPrototypeRouter.create(make_rng(0), 8, 4, 6, 2, metric=MetricKind(tag, heads=2))
        assert ("proto_log_var" in router.arrays()) == MetricKind(tag).uses_prototype_variance


def test_detached_replay_reproduces_forward():
    r = make_rng(36)
    router = LatentPrototypeRouter.create(r, 8, 4, 6, 2)
    x = r.normal(size=(5, 8))
    rp = router.forward(x, rng=r)
    again = router.forward(x, eps=rp.latents.eps, detached=rp.detached)
    assert again.losses == rp.losses
    np.testing.assert_array_equal(again.decision.topk_idx, rp.decision.topk_idx)
    assert isinstance(rp.detached, Detached)
