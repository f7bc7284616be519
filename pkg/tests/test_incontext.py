import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from lila.incontext import (
    LossWeights, RidgeProblem, RidgeSolution, RidgeSolveError, SOLVE_STATS, augment,
    downsample_context, edge_weight, flatten_spatial, in_context_loss, loss_grad, loss_l1,
    loss_total, predict, solve_ridge,
)

T = torch.tensor


def pinv_oracle(x, g, lam):
    """Ridge through the stacked least-squares system [X; sqrt(lam) I] W = [G; 0]."""
    d = x.shape[1]
    a = np.vstack([x, math.sqrt(lam) * np.eye(d)])
    b = np.vstack([g, np.zeros((d, g.shape[1]))])
    return np.linalg.pinv(a) @ b


def ridge_objective(x, g, w, lam):
    return float(((x @ w - g) ** 2).sum() + lam * (w ** 2).sum())


def test_exact_fit_without_bias():
    sol = solve_ridge(RidgeProblem(T([[1.0], [2.0]]), T([[2.0], [4.0]]), lam=0.0, add_bias=False))
    np.testing.assert_allclose(sol.w_star.numpy(), [[2.0]], rtol=1e-14)


def test_hand_normal_equations_lambda_one():
    sol = solve_ridge(RidgeProblem(T([[1.0], [2.0]]), T([[2.0], [4.0]]), lam=1.0, add_bias=False))
    np.testing.assert_allclose(sol.w_star.numpy(), [[10.0 / 6.0]], rtol=1e-14)


def test_random_problem_matches_pinv_oracle():
    rng = np.random.default_rng(0)
    x, g = rng.normal(size=(64, 5)), rng.normal(size=(64, 3))
    sol = solve_ridge(RidgeProblem(torch.from_numpy(x), torch.from_numpy(g), lam=0.1))
    ref = pinv_oracle(np.hstack([x, np.ones((64, 1))]), g, 0.1)
    err = np.linalg.norm(sol.w_star.numpy() - ref) / np.linalg.norm(ref)
    assert err < 1e-8


def test_singular_gram_without_lambda_errors():
    x = torch.ones(10, 2)            # duplicate columns
    with pytest.raises(RidgeSolveError, match="positive lambda"):
        solve_ridge(RidgeProblem(x, torch.zeros(10, 1), lam=0.0, add_bias=False))
    solve_ridge(RidgeProblem(x, torch.zeros(10, 1), lam=0.1, add_bias=False))


def test_batched_solve_matches_loop_and_counts_factorizations():
    rng = np.random.default_rng(1)
    x, g = torch.from_numpy(rng.normal(size=(3, 20, 4))), torch.from_numpy(rng.normal(size=(3, 20, 2)))
    SOLVE_STATS.reset()
    batched = solve_ridge(RidgeProblem(x, g, lam=0.5)).w_star
    assert SOLVE_STATS.count == 3
    for b in range(3):
        single = solve_ridge(RidgeProblem(x[b], g[b], lam=0.5)).w_star
        torch.testing.assert_close(batched[b], single, rtol=1e-12, atol=1e-12)


def test_relative_lambda_default():
    rng = np.random.default_rng(2)
    x, g = rng.normal(size=(30, 4)), rng.normal(size=(30, 2))
    xa = np.hstack([x, np.ones((30, 1))])
    lam = 0.01 * np.trace(xa.T @ xa) / 5
    sol = solve_ridge(RidgeProblem(torch.from_numpy(x), torch.from_numpy(g)))
    np.testing.assert_allclose(sol.w_star.numpy(), pinv_oracle(xa, g, lam), atol=1e-10)


def test_unregularized_bias_toggle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 3))
    g = x @ rng.normal(size=(3, 1)) + 50.0
    sol = solve_ridge(RidgeProblem(torch.from_numpy(x), torch.from_numpy(g), lam=10.0,
                                   regularize_bias=False))
    xa = np.hstack([x, np.ones((40, 1))])
    reg = np.diag([10.0, 10.0, 10.0, 0.0])
    ref = np.linalg.solve(xa.T @ xa + reg, xa.T @ g)
    np.testing.assert_allclose(sol.w_star.numpy(), ref, rtol=1e-10)


def test_huge_lambda_drives_solution_to_zero():
    rng = np.random.default_rng(4)
    x, g = torch.from_numpy(rng.normal(size=(30, 4))), torch.from_numpy(rng.normal(size=(30, 2)))
    norms = [solve_ridge(RidgeProblem(x, g, lam=lam)).w_star.norm().item()
             for lam in (1.0, 1e3, 1e6, 1e9)]
    assert all(b < a for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 1e-6


def test_loss_is_continuous_in_lambda():
    rng = np.random.default_rng(5)
    x0 = torch.from_numpy(rng.normal(size=(6, 6, 4)))
    g = torch.from_numpy(rng.normal(size=(6, 6, 2)))
    w = LossWeights(sigma=0.5)
    a = in_context_loss(x0, x0, g, g, w, lam=1.0)[0]
    b = in_context_loss(x0, x0, g, g, w, lam=1.0 + 1e-9)[0]
    assert abs(float(a - b)) < 1e-7


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.01, 0.1, 1.0]))
def test_perturbing_optimum_never_helps(seed, lam):
    rng = np.random.default_rng(seed)
    n, d, m = rng.integers(8, 64), rng.integers(1, 8), rng.integers(1, 4)
    x, g = rng.normal(size=(n, d)), rng.normal(size=(n, m))
    w = solve_ridge(RidgeProblem(torch.from_numpy(x), torch.from_numpy(g), lam=lam,
                                 add_bias=False)).w_star.numpy()
    base = ridge_objective(x, g, w, lam)
    for _ in range(5):
        step = rng.normal(size=w.shape)
        step *= 1e-3 / np.linalg.norm(step)
        assert ridge_objective(x, g, w + step, lam) >= base - 1e-12


# -- predict / downsample -----------------------------------------------------

def test_predict_examples():
    x = torch.eye(3, dtype=torch.float64)
    w = torch.from_numpy(np.random.default_rng(6).normal(size=(3, 2)))
    sol = RidgeSolution(w, add_bias=False)
    torch.testing.assert_close(predict(x, sol), w)
    assert torch.all(predict(x, RidgeSolution(torch.zeros(3, 2, dtype=torch.float64), False)) == 0)


def test_predict_matches_triple_loop():
    rng = np.random.default_rng(7)
    x, w = rng.normal(size=(8, 3)), rng.normal(size=(3, 2))
    ref = np.zeros((8, 2))
    for i in range(8):
        for j in range(2):
            for k in range(3):
                ref[i, j] += x[i, k] * w[k, j]
    out = predict(torch.from_numpy(x), RidgeSolution(torch.from_numpy(w), False))
    np.testing.assert_allclose(out.numpy(), ref, rtol=1e-13)


def test_predict_spatial_layout_and_dtype():
    rng = np.random.default_rng(8)
    x = torch.from_numpy(rng.normal(size=(2, 4, 5, 3))).float()
    w = torch.from_numpy(rng.normal(size=(2, 4, 2)))
    out = predict(x, RidgeSolution(w, True))
    assert out.shape == (2, 4, 5, 2) and out.dtype == torch.float32
    flat = predict(flatten_spatial(x), RidgeSolution(w, True))
    torch.testing.assert_close(flatten_spatial(out), flat)
    with pytest.raises(ValueError):
        predict(x, RidgeSolution(torch.zeros(3, 2, dtype=torch.float64), True))


def test_downsample_examples():
    x = torch.rand(224, 224, 5, dtype=torch.float64)
    g = torch.rand(224, 224, 3, dtype=torch.float64)
    xs, gs = downsample_context(x, g, 7)
    assert xs.shape == (32, 32, 5) and gs.shape == (32, 32, 3)
    a, b = downsample_context(x, g, 1)
    assert a is x and b is g
    c = torch.full((20, 30, 2), 1.5, dtype=torch.float64)
    cs, _ = downsample_context(c, c, 4)
    torch.testing.assert_close(cs, torch.full((5, 7, 2), 1.5, dtype=torch.float64))
    with pytest.raises(ValueError):
        downsample_context(torch.zeros(6, 10, 1), torch.zeros(6, 10, 1), 7)


# -- losses on hand-evaluated 3x3 instances -----------------------------------

G33 = torch.tensor([[0.0, 1.0, 3.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
                   dtype=torch.float64)[..., None]


def test_l1_examples():
    assert loss_l1(G33, G33).item() == 0.0
    assert loss_l1(G33 + 0.25, G33).item() == pytest.approx(0.25, abs=1e-15)
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    ref = sum(abs(a[i, j] - b[i, j]) for i in range(5) for j in range(4)) / 20
    assert abs(loss_l1(torch.from_numpy(a), torch.from_numpy(b)).item() - ref) < 1e-14
    with pytest.raises(ValueError):
        loss_l1(torch.zeros(2, 2), torch.zeros(2, 3))


def test_edge_weight_examples():
    assert torch.all(edge_weight(torch.ones(3, 3, 1), "x", 0.3) == 0)
    ramp = torch.arange(4, dtype=torch.float64).repeat(3, 1)[..., None] * 0.7
    w = edge_weight(ramp, "x", 0.7)
    assert torch.allclose(w, torch.full_like(w, 1 - math.exp(-1)), rtol=0, atol=1e-12)
    assert edge_weight(ramp * 1e6, "x", 0.7).min().item() == 1.0
    with pytest.raises(ValueError):
        edge_weight(ramp, "x", 0.0)


def test_hand_loss_values_3x3():
    # |grad_x G| = [[1,2,2],0,0]; |grad_y G| = [[0,1,3],0,0]; zero prediction
    pred = torch.zeros_like(G33)
    w = LossWeights(gamma=1.0, sigma=1.0)
    e = math.exp
    l1 = 4 / 9
    lx = ((1 - e(-1)) * 1 + 2 * (1 - e(-2)) * 2) / 9
    ly = ((1 - e(-1)) * 1 + (1 - e(-3)) * 3) / 9
    assert abs(loss_l1(pred, G33).item() - l1) < 1e-12
    assert abs(loss_grad(pred, G33, w).item() - (lx + ly)) < 1e-12
    assert abs(loss_total(pred, G33, w).item() - (l1 + lx + ly)) < 1e-12
    w2 = LossWeights(gamma=2.0, sigma=1.0)
    assert abs(loss_total(pred, G33, w2).item() - (l1 + 2 * (lx + ly))) < 1e-12
    assert loss_total(pred, G33, LossWeights(gamma=0.0, sigma=1.0)).item() == loss_l1(pred, G33).item()


def test_hand_loss_nonzero_prediction_gradient():
    # prediction has its own x-gradient of 1 everywhere
    pred = torch.arange(3, dtype=torch.float64).repeat(3, 1)[..., None]
    w = LossWeights(sigma=2.0)
    e = math.exp
    # x: |1 - gx| weighted by 1 - exp(-gx/2) with gx = [[1,2,2],0,0]
    lx = ((1 - e(-0.5)) * 0 + 2 * (1 - e(-1)) * 1) / 9
    ly = ((1 - e(-0.5)) * 1 + (1 - e(-1.5)) * 3) / 9
    assert abs(loss_grad(pred, G33, w).item() - (lx + ly)) < 1e-12


def test_grad_loss_vanishes_on_flat_query():
    pred = torch.from_numpy(np.random.default_rng(10).normal(size=(4, 4, 2)))
    assert loss_grad(pred, torch.zeros(4, 4, 2, dtype=torch.float64), LossWeights(sigma=1.0)) == 0
    assert loss_grad(G33, G33, LossWeights()).item() == 0


def test_median_sigma_default_used():
    pred = torch.zeros_like(G33)
    # gradient magnitudes [1,2,2,0x6] and [0,1,3,0x6]: median 0 -> floored
    w = loss_grad(pred, G33, LossWeights())
    assert w.item() == pytest.approx((1 * 1 + 2 * 2 + 1 + 3) / 9, abs=1e-12)


# -- differentiability and flow antisymmetry -----------------------------------

def fd_check(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(2, 5), rng.integers(3, 6)      # N <= 25
    d, m = rng.integers(2, 8), rng.integers(1, 3)
    x0 = torch.from_numpy(rng.normal(size=(h, w, d))).requires_grad_()
    xd = torch.from_numpy(rng.normal(size=(h, w, d))).requires_grad_()
    gc = torch.from_numpy(rng.normal(size=(h, w, m)))
    gq = torch.from_numpy(rng.normal(size=(h, w, m)))
    weights = LossWeights(sigma=0.7)

    def f(a, b):
        return in_context_loss(a, b, gc, gq, weights)[0]

    loss = f(x0, xd)
    ga, gb = torch.autograd.grad(loss, (x0, xd))
    eps = 1e-6
    errs = []
    for var, g in ((x0, ga), (xd, gb)):
        fd = torch.zeros_like(var)
        base = var.detach().clone()
        for idx in np.ndindex(*var.shape):
            plus, minus = base.clone(), base.clone()
            plus[idx] += eps
            minus[idx] -= eps
            args_p = (plus, xd.detach()) if var is x0 else (x0.detach(), plus)
            args_m = (minus, xd.detach()) if var is x0 else (x0.detach(), minus)
            fd[idx] = (f(*args_p) - f(*args_m)) / (2 * eps)
        errs.append(float((g - fd).norm() / fd.norm().clamp_min(1e-12)))
    return max(errs)


def test_gradients_match_finite_differences():
    for seed in range(5):
        assert fd_check(seed) < 1e-4


def test_flow_antisymmetry_at_the_optimum():
    rng = np.random.default_rng(11)
    x = torch.from_numpy(rng.normal(size=(6, 6, 5)))
    enc = torch.from_numpy(rng.normal(size=(5, 2)))
    flow = x @ enc                                    # features linearly encode the flow
    fwd = solve_ridge(RidgeProblem(flatten_spatial(x), flatten_spatial(flow), lam=1e-9))
    bwd = solve_ridge(RidgeProblem(flatten_spatial(x), flatten_spatial(-flow), lam=1e-9))
    torch.testing.assert_close(bwd.w_star, -fwd.w_star, rtol=1e-12, atol=1e-12)
    torch.testing.assert_close(predict(x, bwd), -predict(x, fwd), rtol=1e-12, atol=1e-12)
    loss, _, _ = in_context_loss(x, x, flow, flow, LossWeights(sigma=1.0), lam=1e-9)
    assert loss.item() < 1e-6


def test_augment_appends_ones():
    a = augment(torch.zeros(2, 3))
    assert a.shape == (2, 4) and torch.all(a[:, -1] == 1)
