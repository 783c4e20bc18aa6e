"""Measure-change quantities: the running cost g, the jump factor G and the
factor drift under the changed measure."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import InfeasibleControl, MarketModel, margins


@dataclass(frozen=True)
class Criterion:
    theta: float = 1.0
    v: float = 1.0

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        if not self.v > 0:
            raise ValueError(f"initial wealth v must be positive, got {self.v}")

    @property
    def terminal_value(self) -> float:
        """v^{-theta}, the terminal datum of the transformed value."""
        return self.v ** (-self.theta)


def _neg_power(u: np.ndarray, theta: float) -> np.ndarray:
    # (1 + u)^{-theta}, accurate near u = 0
    return np.exp(-theta * np.log1p(u))


def jump_cost(model: MarketModel, criterion: Criterion, H: np.ndarray) -> np.ndarray:
    """sum_j lambda_j {(1/theta)[(1+u_j)^{-theta} - 1] + u_j 1[compensated_j]}, u_j = h'psi_j.

    Vectorised over leading axes of ``H``; infeasible rows give +inf.
    """
    H = np.asarray(H, dtype=float)
    if len(model.jumps) == 0:
        return np.zeros(H.shape[:-1])
    th = criterion.theta
    u = H @ model.jumps.marks.T
    lam = model.jumps.intensities
    comp = model.jumps.compensated.astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        # expm1 keeps the O(u^2) compensated bracket free of cancellation
        bracket = np.expm1(-th * np.log1p(u)) / th + u * comp
        out = bracket @ lam
    return np.where(np.all(u > -1.0, axis=-1), out, np.inf)


def g_values(model: MarketModel, criterion: Criterion, X: np.ndarray, H: np.ndarray) -> np.ndarray:
    """Vectorised g(x, h): X (..., n), H (..., m) -> (...)."""
    th = criterion.theta
    X = np.asarray(X, dtype=float)
    H = np.asarray(H, dtype=float)
    S = model.SigmaSigmaT
    quad = 0.5 * (th + 1.0) * np.einsum("...i,ij,...j->...", H, S, H)
    lin = np.einsum("...i,...i->...", H, model.a_hat + X @ model.A_hat.T)
    return quad - model.a0 - X @ model.A0 - lin + jump_cost(model, criterion, H)


def g_value(model: MarketModel, criterion: Criterion, x, h) -> float:
    """Running cost g(x, h; theta) of the exponentially transformed criterion."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if len(model.jumps) and np.min(margins(model, h)) <= 0:
        raise InfeasibleControl(f"h={h.tolist()} violates 1 + h'psi > 0")
    return float(g_values(model, criterion, x, h))


def big_g(criterion: Criterion, h, mark) -> float:
    """G(z, h; theta) = 1 - (1 + h'gamma(z))^{-theta}."""
    u = float(np.dot(np.atleast_1d(h), np.atleast_1d(mark)))
    if u <= -1.0:
        raise InfeasibleControl(f"1 + h'mark = {1 + u} <= 0")
    return float(-np.expm1(-criterion.theta * np.log1p(u)))


def effective_drift(model: MarketModel, criterion: Criterion, t: float, x, h) -> np.ndarray:
    """Factor drift under the changed measure: b + Bx - theta Lambda(t) Sigma' h."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if x.shape[-1] != model.n or h.shape[-1] != model.m:
        raise ValueError(f"x must end in {model.n} and h in {model.m} components")
    LS = model.Lambda_at(t) @ model.Sigma.T
    return model.b + x @ model.B.T - criterion.theta * h @ LS.T
