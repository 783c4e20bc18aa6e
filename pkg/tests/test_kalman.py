import numpy as np
import pytest

from conftest import make_f1
from oracles import f1_c_vector
from riskjump.kalman import (A0NotZero, FilterParams, GridMismatch, StepTooLarge, compute_c,
                             decompose_observations, innovations, reduced_model, riccati_solve,
                             run_filter, sample_prior, write_filter_csv)
from riskjump.model import JumpAtom, JumpMeasure, ModelError, validate_model
from riskjump.montecarlo import PathConfig, simulate_physical

C_F1 = -0.020803660  # oracle value rounded; compared at 1e-9


def test_c_matches_oracle(f1):
    assert compute_c(f1)[0] == pytest.approx(float(f1_c_vector()), abs=1e-15)
    assert compute_c(f1)[0] == pytest.approx(C_F1, abs=1e-9)


def test_c_jump_free(f1_nojump):
    assert compute_c(f1_nojump)[0] == pytest.approx(0.03 - 0.5 * 0.0625, abs=1e-16)


def test_c_uncompensated_atoms_do_not_enter(f1):
    jm = JumpMeasure(tuple(JumpAtom(a.mark, a.intensity, False) for a in f1.jumps.atoms))
    m = validate_model(make_f1(jumps=jm))
    assert compute_c(m)[0] == pytest.approx(0.03 - 0.5 * 0.0625, abs=1e-16)


def test_c_requires_zero_A0(f1b):
    with pytest.raises(A0NotZero):
        compute_c(f1b)


def test_c_rejects_minus_one_mark():
    jm = JumpMeasure((JumpAtom([-1.0], 1.0, True), JumpAtom([0.1], 1.0, True)))
    with pytest.raises(ModelError):
        compute_c(make_f1(jumps=jm))


def test_riccati_linear_growth():
    # factor noise orthogonal to the asset noise, no drift, no information: P = P0 + 0.04 t
    m = validate_model(make_f1(B=[[0.0]], b=[0.0], Lambda=[[0.0, 0.2]], A=[[0.0]], a=[0.02]))
    t = np.linspace(0, 1, 11)
    P = riccati_solve(m, [[0.1]], t)
    np.testing.assert_allclose(P[:, 0, 0], 0.1 + 0.04 * t, atol=1e-15)


def test_riccati_step_halving(f1):
    t = np.linspace(0, 1, 41)
    P1 = riccati_solve(f1, [[0.1]], t)
    P2 = riccati_solve(f1, [[0.1]], t, substeps=2)
    np.testing.assert_allclose(P1, P2, atol=1e-9)
    assert np.all(P1[:, 0, 0] > 0)


def test_riccati_too_large_step(f1):
    m = validate_model(make_f1(A=[[40.0]]))
    with pytest.raises(StepTooLarge):
        riccati_solve(m, [[5.0]], np.linspace(0, 1, 3))


def test_filter_params_validation():
    with pytest.raises(ValueError):
        FilterParams([0.0, 0.0], [[1.0, 0.5], [0.4, 1.0]])
    with pytest.raises(ValueError):
        FilterParams([0.0], [[-1.0]])


@pytest.fixture(scope="module")
def observed(f1, crit):
    cfg = PathConfig(num_paths=4000, dt=0.01, seed=3)
    params = FilterParams([0.0], [[0.1]])
    x0 = sample_prior(params, cfg.num_paths, seed=3)
    paths = simulate_physical(f1, crit, 0.0, x0, cfg=cfg, record_paths=True)
    return params, paths


def test_decomposition_identity(f1, observed):
    _, p = observed
    d = decompose_observations(f1, p.times, p.log_price, p.step_counts)
    np.testing.assert_allclose(d.y1 + d.y2, d.y, atol=1e-15)
    # the continuous part has no jumps: its increments are Gaussian given X
    incr = np.diff(d.y1, axis=0) - p.X[:-1] @ f1.A_hat.T * 0.01
    z = incr / (0.25 * np.sqrt(0.01))
    assert abs(z.mean()) < 0.01 and z.std() == pytest.approx(1.0, rel=0.01)


def test_decomposition_without_jumps(f1_nojump, crit):
    p = simulate_physical(f1_nojump, crit, 0.0, [0.0], cfg=PathConfig(num_paths=10, dt=0.1),
                          record_paths=True)
    d = decompose_observations(f1_nojump, p.times, p.log_price, p.step_counts)
    np.testing.assert_allclose(d.y2[:, 0, 0], compute_c(f1_nojump)[0] * p.times, atol=1e-16)


def test_filter_covariance_matches_empirical(f1, observed):
    params, p = observed
    d = decompose_observations(f1, p.times, p.log_price, p.step_counts)
    st = run_filter(f1, params, d.y1, p.times)
    err = p.X[..., 0] - st.x_hat[..., 0]
    for k in (25, 50, 100):
        assert np.mean(err[k] ** 2) == pytest.approx(st.P[k, 0, 0], rel=0.1)
    z = innovations(f1, st, d.y1) / np.sqrt(0.01)
    assert abs(z.mean()) < 3 * z.std() / np.sqrt(z.size)
    assert z.std() == pytest.approx(1.0, rel=0.01)


def test_filter_without_factor_noise():
    # Lambda = 0 and P0 = 0: the filter mean is the deterministic factor path
    m = validate_model(make_f1(Lambda=[[0.0, 0.0]]))
    t = np.linspace(0, 1, 101)
    y1 = np.zeros((101, 5, 1))
    st = run_filter(m, FilterParams([1.0], [[0.0]]), y1, t)
    np.testing.assert_allclose(st.P, 0.0, atol=1e-16)
    want = 1.0
    for k in range(100):
        want += (0.1 - 0.5 * want) * 0.01
    np.testing.assert_allclose(st.x_hat[-1, :, 0], want, rtol=1e-13)


def test_filter_grid_mismatch(f1):
    with pytest.raises(GridMismatch):
        run_filter(f1, FilterParams([0.0], [[0.1]]), np.zeros((5, 1)), np.linspace(0, 1, 6))


def test_reduced_model(f1):
    t = np.linspace(0, 1, 11)
    P = riccati_solve(f1, [[0.1]], t)
    r = reduced_model(f1, t, P)
    np.testing.assert_allclose(r.Sigma @ r.Sigma.T, f1.SigmaSigmaT, atol=1e-16)
    assert r.noise_dim == f1.m
    assert r.Lambda_at(0.0)[0, 0] == pytest.approx((0.05 + 0.1 * 0.4) / 0.25, rel=1e-14)
    want = (0.05 + P[5, 0, 0] * 0.4) / 0.25
    assert r.Lambda_at(0.5)[0, 0] == pytest.approx(want, rel=1e-12)


def test_two_asset_square_root():
    S = np.array([[0.09, 0.02], [0.02, 0.04]])
    L = np.linalg.cholesky(S)
    m = validate_model(make_f1(
        a=[0.05, 0.04], A=[[0.4], [0.1]], Sigma=np.hstack([L, np.zeros((2, 1))]),
        Lambda=[[0.0, 0.05, 0.2]],
        jumps=JumpMeasure((JumpAtom([-0.15, -0.1], 1.0, True), JumpAtom([0.10, 0.05], 1.5, True)))))
    r = reduced_model(m, np.linspace(0, 1, 5), riccati_solve(m, [[0.1]], np.linspace(0, 1, 5)))
    np.testing.assert_allclose(r.Sigma, r.Sigma.T, atol=1e-16)
    np.testing.assert_allclose(r.Sigma @ r.Sigma, S, atol=1e-15)


def test_sample_prior_moments():
    params = FilterParams([0.5, -0.2], [[0.1, 0.02], [0.02, 0.05]])
    x = sample_prior(params, 50000, seed=1)
    np.testing.assert_allclose(x.mean(axis=0), params.m0, atol=0.01)
    np.testing.assert_allclose(np.cov(x.T), params.P0, rtol=0.05, atol=1e-3)
    np.testing.assert_array_equal(x, sample_prior(params, 50000, seed=1))


def test_filter_csv(tmp_path, f1):
    t = np.linspace(0, 1, 6)
    st = run_filter(f1, FilterParams([0.0], [[0.1]]), np.zeros((6, 1)), t)
    write_filter_csv(tmp_path / "f.csv", st)
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "t,x_hat1,P11" and len(lines) == 7
