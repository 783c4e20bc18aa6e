"""Property tests over randomly drawn models, policies and states."""
import numpy as np
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from riskjump.criterion import Criterion, big_g, g_value, g_values
from riskjump.model import (JumpAtom, JumpMeasure, MarketModel, feasible_margin, margins,
                            validate_model)
from riskjump.optimizer import (inner_objective, linear_coefficient, maximize_inner, zero_beta)

SETTINGS = settings(max_examples=60, deadline=None)
floats = lambda lo, hi: st.floats(lo, hi, allow_nan=False, allow_infinity=False)


@st.composite
def models(draw, n_max=2, m_max=2, jumps=True, A0=False):
    n = draw(st.integers(1, n_max))
    m = draw(st.integers(1, m_max))
    arr = lambda shape, lo=-1.0, hi=1.0: np.array(
        draw(st.lists(floats(lo, hi), min_size=int(np.prod(shape)), max_size=int(np.prod(shape))))
    ).reshape(shape)
    L = np.tril(arr((m, m), -0.1, 0.1), k=-1) + np.diag(arr((m,), 0.1, 0.4))
    Sigma = np.hstack([L, np.zeros((m, n))])
    Lam = arr((n, n + m), -0.3, 0.3)
    B = -np.diag(arr((n,), 0.2, 1.0)) + 0.1 * arr((n, n))
    atoms = []
    if jumps:
        for i in range(m):
            for sign in (-1.0, 1.0):
                mark = 0.05 * arr((m,), -1, 1)
                mark[i] = sign * draw(floats(0.05, 0.5))
                atoms.append(JumpAtom(mark, draw(floats(0.1, 2.0)), draw(st.booleans())))
    a0 = draw(floats(0.0, 0.05))
    raw = MarketModel(b=arr((n,), -0.2, 0.2), B=B, Lambda=Lam, a0=a0,
                      A0=arr((n,), -0.2, 0.2) if A0 else np.zeros(n),
                      a=a0 + arr((m,), -0.1, 0.1), A=arr((m, n)), Sigma=Sigma,
                      jumps=JumpMeasure(tuple(atoms), pure_diffusion=not jumps))
    return validate_model(raw)


criteria = st.builds(Criterion, floats(0.2, 5.0), floats(0.5, 2.0))


def feasible_point(model, draw, scale=1.0):
    d = np.array(draw(st.lists(floats(-1, 1), min_size=model.m, max_size=model.m)))
    frac = draw(floats(0.0, 0.95))
    if len(model.jumps) == 0:
        return scale * d
    worst = np.min(model.jumps.marks @ d) if np.any(d) else 0.0
    if worst >= 0:
        return scale * d
    return d * frac / -worst


@SETTINGS
@given(models())
def test_margin_at_zero_is_one(model):
    assert feasible_margin(model, np.zeros(model.m)) == 1.0


@SETTINGS
@given(models(), st.data())
def test_margin_concave(model, data):
    h1 = feasible_point(model, data.draw)
    h2 = feasible_point(model, data.draw)
    k = data.draw(floats(0.0, 1.0))
    mix = feasible_margin(model, k * h1 + (1 - k) * h2)
    assert mix >= k * feasible_margin(model, h1) + (1 - k) * feasible_margin(model, h2) - 1e-12
    assert mix > 0


@SETTINGS
@given(models())
def test_validation_idempotent(model):
    again = validate_model(model)
    assert again.rank_A_hat_is_n == model.rank_A_hat_is_n
    np.testing.assert_array_equal(again.A_hat, model.A_hat)
    np.testing.assert_array_equal(again.a_hat, model.a_hat)


@SETTINGS
@given(models(), criteria, st.data())
def test_g_strictly_convex_in_h(model, crit, data):
    h = feasible_point(model, data.draw)
    d = np.array(data.draw(st.lists(floats(-1, 1), min_size=model.m, max_size=model.m)))
    assume(np.linalg.norm(d) > 1e-3)
    d *= 1e-3 / np.linalg.norm(d)
    assume(feasible_margin(model, h + d) > 0 and feasible_margin(model, h - d) > 0)
    x = np.zeros(model.n)
    second = g_value(model, crit, x, h + d) + g_value(model, crit, x, h - d) - 2 * g_value(model, crit, x, h)
    lam_min = np.linalg.eigvalsh(model.SigmaSigmaT)[0]
    assert second > 0.5 * (crit.theta + 1) * lam_min * 1e-6


@SETTINGS
@given(models(), criteria, st.data())
def test_g_blows_up_at_the_boundary(model, crit, data):
    h = feasible_point(model, data.draw)
    assume(np.linalg.norm(h) > 1e-3)
    # walk along the ray until the first atom margin reaches zero
    u = model.jumps.marks @ h
    assume(np.any(u < -1e-6))
    t_edge = np.min(-1.0 / u[u < -1e-6])
    x = np.zeros(model.n)
    vals = [g_value(model, crit, x, t_edge * (1 - eps) * h) for eps in (1e-2, 1e-4, 1e-6, 1e-8)]
    assert np.all(np.diff(vals) > 0)
    assert vals[-1] > 1.0 / crit.theta


@SETTINGS
@given(criteria, floats(-0.999, 50.0), floats(-1, 1))
def test_big_g_below_one(crit, u, sgn):
    assert big_g(crit, [1.0], [u]) < 1.0


@SETTINGS
@given(models(), criteria, st.data())
def test_inner_optimum_certificate(model, crit, data):
    x = np.array(data.draw(st.lists(floats(-1, 1), min_size=model.n, max_size=model.n)))
    p = np.array(data.draw(st.lists(floats(-1, 1), min_size=model.n, max_size=model.n)))
    sol = maximize_inner(model, crit, x, p)
    assert sol.margin > 0
    assert sol.objective >= 0
    rng = np.random.default_rng(data.draw(st.integers(0, 2 ** 32 - 1)))
    for _ in range(20):
        d = rng.standard_normal(model.m)
        d *= rng.uniform(0, 1e-3) / np.linalg.norm(d)
        if feasible_margin(model, sol.h_star + d) > 0:
            assert inner_objective(model, crit, x, p, sol.h_star + d) <= sol.objective + 1e-12


@SETTINGS
@given(models(jumps=False), criteria, st.data())
def test_jump_free_optimum_affine_in_p(model, crit, data):
    x = np.array(data.draw(st.lists(floats(-1, 1), min_size=model.n, max_size=model.n)))
    p1 = np.array(data.draw(st.lists(floats(-1, 1), min_size=model.n, max_size=model.n)))
    p2 = np.array(data.draw(st.lists(floats(-1, 1), min_size=model.n, max_size=model.n)))
    h = lambda p: maximize_inner(model, crit, x, p).h_star
    np.testing.assert_allclose(h(p1) + h(p2) - 2 * h(0.5 * (p1 + p2)), 0.0, atol=1e-10)
    # and agrees with the closed form
    c = linear_coefficient(model, crit, x, p1)
    np.testing.assert_allclose(h(p1), np.linalg.solve((crit.theta + 1) * model.SigmaSigmaT, c), atol=1e-10)


@SETTINGS
@given(models(A0=True), criteria, st.data())
def test_zero_beta_is_factor_free(model, crit, data):
    assume(model.rank_A_hat_is_n)
    try:
        zb = zero_beta(model, crit)
    except ValueError:
        # no admissible zero-beta policy for this draw
        assume(False)
    np.testing.assert_allclose(zb.h_check @ model.A_hat, -model.A0, atol=1e-10)
    assert feasible_margin(model, zb.h_check) > 0
    X = np.array(data.draw(st.lists(floats(-5, 5), min_size=2 * model.n, max_size=2 * model.n)))
    g = g_values(model, crit, X.reshape(2, model.n), np.broadcast_to(zb.h_check, (2, model.m)))
    assert np.all(np.abs(g - zb.g_check) <= 1e-12 * (1 + abs(zb.g_check)) * (1 + np.abs(X).sum()))


@SETTINGS
@given(models(), st.data())
def test_margins_vectorised_matches_scalar(model, data):
    H = np.array([feasible_point(model, data.draw) for _ in range(3)])
    np.testing.assert_allclose(margins(model, H).min(axis=-1),
                               [feasible_margin(model, h) for h in H], rtol=0, atol=1e-15)
