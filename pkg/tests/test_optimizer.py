import numpy as np
import pytest

from riskjump.criterion import Criterion, g_value
from riskjump.model import InfeasibleControl, JumpAtom, JumpMeasure, feasible_margin, validate_model
from riskjump.optimizer import (NewtonConfig, NoConvergence, RankDeficient, ZeroBetaInfeasible,
                                inner_grad_hess, inner_objective, maximize_inner,
                                maximize_inner_batch, zero_beta)

from conftest import make_f1

# frozen from tests/oracles.py (golden-section search in mpmath)
F1_ARGMAX = 0.1493283505017352967602781
F1_MAXVAL = 0.0022433804029169734789
F1_ARGMAX_X05_PM03 = 1.162584923960298941552563
F1B_G_CHECK = 0.0010495347564313081554
XIND_G_MIN = -0.0222433804029169734788696


def test_objective_zero_at_origin(f1, crit, rng):
    for _ in range(5):
        x, p = rng.normal(size=1), rng.normal(size=1)
        assert inner_objective(f1, crit, x, p, [0.0]) == 0.0


def test_jump_free_objective_at_peak(f1_nojump, crit):
    assert inner_objective(f1_nojump, crit, [0.0], [0.0], [0.24]) == pytest.approx(0.0036, rel=1e-13)


def test_objective_diverges_at_boundary(f1, crit):
    vals = [inner_objective(f1, crit, [0.0], [0.0], [h]) for h in (6.0, 6.6, 6.66, 6.666, 6.6666)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert vals[-1] < -1e3
    with pytest.raises(InfeasibleControl):
        inner_objective(f1, crit, [0.0], [0.0], [6.7])


def test_gradient_at_origin_compensated(f1, crit, rng):
    x, p = rng.normal(size=1), rng.normal(size=1)
    grad, _ = inner_grad_hess(f1, crit, x, p, [0.0])
    SL = f1.Sigma @ f1.Lambda.T
    want = f1.a_hat + f1.A_hat @ x - crit.theta * SL @ p
    np.testing.assert_allclose(grad, want, rtol=1e-14)


def test_hessian_negative_definite(f1, crit, rng):
    for _ in range(20):
        h = rng.uniform(-9.9, 6.6, size=1)
        _, H = inner_grad_hess(f1, crit, [0.0], [0.1], h)
        assert np.all(np.linalg.eigvalsh(H) < 0)


def test_closed_form_jump_free(f1_nojump, crit):
    assert maximize_inner(f1_nojump, crit, [0.0], [0.0]).h_star[0] == pytest.approx(0.24, abs=1e-12)
    assert maximize_inner(f1_nojump, crit, [0.0], [0.1]).h_star[0] == pytest.approx(0.20, abs=1e-12)


def test_f1_matches_scan_oracle(f1, crit):
    sol = maximize_inner(f1, crit, [0.0], [0.0])
    assert sol.h_star[0] == pytest.approx(F1_ARGMAX, abs=1e-10)
    assert sol.objective == pytest.approx(F1_MAXVAL, rel=1e-10)
    assert sol.margin > 0 and sol.objective >= 0
    assert sol.grad_norm <= 1e-10
    sol = maximize_inner(f1, crit, [0.5], [-0.3])
    assert sol.h_star[0] == pytest.approx(F1_ARGMAX_X05_PM03, abs=1e-10)


def test_solution_near_boundary(f1, crit):
    # a large coefficient pushes the maximiser close to the binding atom
    sol = maximize_inner(f1, crit, [40.0], [0.0])
    assert 0 < sol.margin < 0.2
    grad, _ = inner_grad_hess(f1, crit, [40.0], [0.0], sol.h_star)
    assert abs(grad[0]) <= 1e-10 * 16.0


def test_batch_matches_single(f1, crit, rng):
    X = rng.uniform(-3, 3, size=(30, 1))
    P = rng.uniform(-2, 2, size=(30, 1))
    c = f1.a_hat + X @ f1.A_hat.T - crit.theta * P @ (f1.Sigma @ f1.Lambda.T).T
    batch = maximize_inner_batch(f1, crit, c)
    for i in range(30):
        single = maximize_inner(f1, crit, X[i], P[i])
        assert batch.h_star[i, 0] == pytest.approx(single.h_star[0], abs=1e-12)


def test_iteration_cap_raises(f1, crit):
    with pytest.raises(NoConvergence):
        maximize_inner(f1, crit, [40.0], [0.0], NewtonConfig(max_iter=1))


def test_zero_beta_f1(f1, crit):
    zb = zero_beta(f1, crit)
    assert zb.h_check[0] == 0.0
    assert zb.g_check == pytest.approx(-0.02, abs=1e-17)


def test_zero_beta_f1b(f1b, crit):
    zb = zero_beta(f1b, crit)
    assert zb.h_check[0] == pytest.approx(-1 / 3, abs=1e-15)
    assert zb.g_check == pytest.approx(F1B_G_CHECK, rel=1e-12)
    assert abs(f1b.A_hat.T @ zb.h_check + f1b.A0)[0] <= 1e-10
    for x in (-5.0, 0.7, 3.0):
        assert g_value(f1b, crit, [x], zb.h_check) == pytest.approx(zb.g_check, rel=1e-12)


def test_zero_beta_rank_deficient(crit):
    with pytest.raises(RankDeficient):
        zero_beta(validate_model(make_f1(A0=[0.1], A=[[0.1]])), crit)


def test_zero_beta_infeasible(crit):
    # A_hat = 0.01 forces h = -10, which sits on the boundary of the admissible interval
    with pytest.raises(ZeroBetaInfeasible):
        zero_beta(validate_model(make_f1(A0=[0.1], A=[[0.11]])), crit)


def test_min_cost_zero_beta(f1_xind, crit):
    # with A_hat = 0 every constant policy is zero-beta; the cheapest one minimises g
    zb = zero_beta(f1_xind, crit, "min_cost")
    assert zb.h_check[0] == pytest.approx(F1_ARGMAX, abs=1e-10)
    assert zb.g_check == pytest.approx(XIND_G_MIN, rel=1e-12)
    assert zero_beta(f1_xind, crit, "min_norm").h_check[0] == 0.0


def test_min_cost_matches_min_norm_when_unique(f1b, crit):
    a = zero_beta(f1b, crit, "min_norm")
    b = zero_beta(f1b, crit, "min_cost")
    np.testing.assert_allclose(a.h_check, b.h_check, atol=1e-15)


def test_theta_two(crit):
    m = validate_model(make_f1())
    sol = maximize_inner(m, Criterion(2.0), [0.2], [0.1])
    grad, hess = inner_grad_hess(m, Criterion(2.0), [0.2], [0.1], sol.h_star)
    assert abs(grad[0]) <= 1e-10 and hess[0, 0] < 0


def test_multi_asset_maximiser(crit):
    jumps = JumpMeasure((JumpAtom([-0.2, 0.1], 1.0), JumpAtom([0.1, -0.2], 1.0),
                         JumpAtom([0.1, 0.1], 1.0)))
    m = validate_model(make_f1().with_(
        b=[0.1], B=[[-0.5]], Lambda=[[0.2, 0.05, 0.0]], A0=[0.0], a=[0.05, 0.04],
        A=[[0.4], [0.1]], Sigma=[[0.25, 0.0, 0.0], [0.05, 0.2, 0.0]], jumps=jumps))
    sol = maximize_inner(m, crit, [0.3], [0.2])
    assert feasible_margin(m, sol.h_star) > 0
    rng = np.random.default_rng(3)
    for _ in range(50):
        d = rng.uniform(-1e-3, 1e-3, size=2)
        assert inner_objective(m, crit, [0.3], [0.2], sol.h_star + d) <= sol.objective + 1e-12
