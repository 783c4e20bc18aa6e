import numpy as np
import pytest

from riskjump.criterion import Criterion, big_g, effective_drift, g_value, g_values, jump_cost
from riskjump.model import InfeasibleControl

# frozen from tests/oracles.py (mpmath, 40 digits)
G_F1_HALF = -0.0097224903474903474903
G_NOJUMP_HALF = -0.019375
BIG_G_THETA2 = 0.17355371900826446281


def test_criterion_validation():
    with pytest.raises(ValueError):
        Criterion(theta=0.0)
    with pytest.raises(ValueError):
        Criterion(v=-1.0)
    assert Criterion(2.0, 4.0).terminal_value == pytest.approx(1 / 16)


def test_g_at_zero_policy(f1, crit):
    for x in (-3.0, 0.0, 2.5):
        assert g_value(f1, crit, [x], [0.0]) == pytest.approx(-0.02, abs=1e-17)


def test_g_f1_half(f1, crit):
    # components 0.015625 - 0.02 - 0.015 + jump bracket
    assert g_value(f1, crit, [0.0], [0.5]) == pytest.approx(G_F1_HALF, rel=1e-14)


def test_g_without_jumps(f1_nojump, crit):
    assert g_value(f1_nojump, crit, [0.0], [0.5]) == pytest.approx(G_NOJUMP_HALF, rel=1e-14)


def test_g_infeasible(f1, crit):
    with pytest.raises(InfeasibleControl):
        g_value(f1, crit, [0.0], [7.0])
    assert np.isinf(g_values(f1, crit, np.zeros((1, 1)), np.array([[7.0]])))[0]


def test_g_vectorised_matches_scalar(f1, crit, rng):
    X = rng.uniform(-2, 2, size=(20, 1))
    H = rng.uniform(-5, 5, size=(20, 1))
    vec = g_values(f1, crit, X, H)
    for i in range(20):
        assert vec[i] == pytest.approx(g_value(f1, crit, X[i], H[i]), rel=1e-14, abs=1e-16)


def test_compensated_bracket_is_second_order(f1, crit):
    # for tiny u the bracket behaves like lambda (theta+1) u^2 / 2
    h = np.array([[1e-6]])
    psi = f1.jumps.marks[:, 0]
    want = np.sum(f1.jumps.intensities * 0.5 * (crit.theta + 1) * (1e-6 * psi) ** 2)
    assert jump_cost(f1, crit, h)[0] == pytest.approx(want, rel=1e-5)


def test_big_g_examples():
    assert big_g(Criterion(1.0), [0.0], [0.3]) == 0.0
    assert big_g(Criterion(1.0), [1.0], [1.0]) == pytest.approx(0.5, rel=1e-15)
    assert big_g(Criterion(2.0), [1.0], [0.1]) == pytest.approx(BIG_G_THETA2, rel=1e-14)
    with pytest.raises(InfeasibleControl):
        big_g(Criterion(1.0), [2.0], [-0.5])


def test_effective_drift_examples(f1, crit):
    assert effective_drift(f1, crit, 0.0, [1.0], [0.0])[0] == pytest.approx(-0.4, abs=1e-16)
    assert effective_drift(f1, crit, 0.0, [1.0], [0.2])[0] == pytest.approx(-0.41, abs=1e-16)
    assert effective_drift(f1, crit, 0.0, [0.0], [0.0])[0] == pytest.approx(0.1, abs=1e-16)
    with pytest.raises(ValueError):
        effective_drift(f1, crit, 0.0, [0.0, 1.0], [0.0])
