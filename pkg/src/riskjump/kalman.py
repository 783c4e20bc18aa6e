"""Partial observation of the factor: split the discounted log prices into a
continuous part driven by the factor and a pure-jump part, filter the factor
from the continuous part, and assemble the equivalent fully observed model.

The observation is Y = discounted log price, so that

    dY^1 = A_hat X dt + Sigma dW,
    Y^2  = log s + c t + sum_{arrivals} log(1 + psi) - t sum_{comp} lambda log(1 + psi).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import MarketModel, ModelError


class A0NotZero(ModelError):
    pass


class StepTooLarge(RuntimeError):
    pass


class GridMismatch(ValueError):
    pass


@dataclass(frozen=True)
class FilterParams:
    m0: np.ndarray
    P0: np.ndarray

    def __post_init__(self):
        m0 = np.atleast_1d(np.asarray(self.m0, dtype=float))
        P0 = np.asarray(self.P0, dtype=float).reshape(m0.size, m0.size)
        if not np.allclose(P0, P0.T, atol=1e-14):
            raise ValueError("P0 must be symmetric")
        if np.linalg.eigvalsh(P0)[0] < -1e-12 * max(1.0, np.trace(P0)):
            raise ValueError("P0 must be positive semidefinite")
        object.__setattr__(self, "m0", m0)
        object.__setattr__(self, "P0", P0)


@dataclass
class FilterState:
    t_grid: np.ndarray
    x_hat: np.ndarray   # (K+1, ..., n)
    P: np.ndarray       # (K+1, n, n)


@dataclass
class Decomposition:
    t_grid: np.ndarray
    y: np.ndarray       # (K+1, ..., m)
    y1: np.ndarray
    y2: np.ndarray
    c: np.ndarray


def _sym_sqrt(S):
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return (V * np.sqrt(w)) @ V.T, (V / np.sqrt(w)) @ V.T


def compute_c(model: MarketModel) -> np.ndarray:
    """c = a_hat - diag(Sigma Sigma')/2 + sum_{comp} lambda [log(1 + psi) - psi]."""
    if np.any(model.A0):
        raise A0NotZero("the partial-observation reduction requires A0 = 0")
    c = model.a_hat - 0.5 * np.diag(model.SigmaSigmaT)
    if len(model.jumps):
        psi = model.jumps.marks
        comp = model.jumps.compensated
        if np.any(psi <= -1.0):
            raise ModelError("a mark equal to -1 makes the log-price jump infinite")
        c = c + model.jumps.intensities[comp] @ (np.log1p(psi[comp]) - psi[comp])
    return c


def decompose_observations(model: MarketModel, t_grid, log_price, step_counts,
                           log_s0=0.0) -> Decomposition:
    """Split observed discounted log prices using the recorded jump arrivals.

    log_price: (K+1, ..., m) starting at log_s0; step_counts: (K, ..., J)
    arrivals per step and atom.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    y = np.asarray(log_price, dtype=float)
    c = compute_c(model)
    log_s0 = np.broadcast_to(np.asarray(log_s0, dtype=float), (model.m,))
    tau = (t_grid - t_grid[0]).reshape((-1,) + (1,) * (y.ndim - 1))
    y2 = log_s0 + c * tau
    if len(model.jumps):
        lpsi = np.log1p(model.jumps.marks)                        # (J, m)
        comp = model.jumps.compensated
        jumps = np.asarray(step_counts, dtype=float) @ lpsi       # (K, ..., m)
        cum = np.concatenate([np.zeros((1,) + jumps.shape[1:]), np.cumsum(jumps, axis=0)])
        y2 = y2 + cum - tau * (model.jumps.intensities[comp] @ lpsi[comp])
    y2 = np.broadcast_to(y2, y.shape)
    return Decomposition(t_grid, y, y - y2, np.array(y2), c)


def _riccati_rhs(model: MarketModel):
    S = model.SigmaSigmaT
    Sinv = np.linalg.inv(S)
    Sig, Lam, Ah = model.Sigma, model.Lambda, model.A_hat
    Xi = np.eye(model.noise_dim) - Sig.T @ Sinv @ Sig
    Q = Lam @ Xi @ Xi.T @ Lam.T
    F = model.B - Lam @ Sig.T @ Sinv @ Ah
    R = Ah.T @ Sinv @ Ah

    def rhs(P):
        return Q - P @ R @ P + F @ P + P @ F.T

    return rhs


def riccati_solve(model: MarketModel, P0, t_grid, substeps: int = 1) -> np.ndarray:
    """Filter error covariance on ``t_grid`` by classical RK4 with ``substeps``
    equal steps per grid interval; symmetrised every step."""
    rhs = _riccati_rhs(model)
    t_grid = np.asarray(t_grid, dtype=float)
    n = model.n
    P = np.asarray(P0, dtype=float).reshape(n, n).copy()
    out = np.empty((t_grid.size, n, n))
    out[0] = P
    for k in range(t_grid.size - 1):
        h = (t_grid[k + 1] - t_grid[k]) / substeps
        for _ in range(substeps):
            k1 = rhs(P)
            k2 = rhs(P + 0.5 * h * k1)
            k3 = rhs(P + 0.5 * h * k2)
            k4 = rhs(P + h * k3)
            P = P + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            P = 0.5 * (P + P.T)
        w, V = np.linalg.eigh(P)
        floor = -1e-10 * max(np.trace(P), 0.0) / n
        if w[0] < floor:
            raise StepTooLarge(
                f"covariance lost positive semidefiniteness at t={t_grid[k + 1]:.6g} "
                f"(eigenvalue {w[0]:.3e}); halve the step")
        if w[0] < 0:
            P = (V * np.clip(w, 0.0, None)) @ V.T
        out[k + 1] = P
    return out


def run_filter(model: MarketModel, params: FilterParams, y1, t_grid, P=None) -> FilterState:
    """Euler recursion of the filter mean; y1 is (K+1, ..., m), vectorised over paths."""
    t_grid = np.asarray(t_grid, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    if y1.shape[0] != t_grid.size or y1.shape[-1] != model.m:
        raise GridMismatch(f"y1 has shape {y1.shape}, expected ({t_grid.size}, ..., {model.m})")
    if P is None:
        P = riccati_solve(model, params.P0, t_grid)
    elif P.shape[0] != t_grid.size:
        raise GridMismatch("covariance trajectory and time grid differ in length")
    Sinv = np.linalg.inv(model.SigmaSigmaT)
    LS = model.Lambda @ model.Sigma.T
    xh = np.empty(y1.shape[:-1] + (model.n,))
    xh[0] = params.m0
    for k in range(t_grid.size - 1):
        dt = t_grid[k + 1] - t_grid[k]
        gain = (LS + P[k] @ model.A_hat.T) @ Sinv
        x = xh[k]
        resid = y1[k + 1] - y1[k] - x @ model.A_hat.T * dt
        xh[k + 1] = x + (model.b + x @ model.B.T) * dt + resid @ gain.T
    return FilterState(t_grid, xh, P)


def innovations(model: MarketModel, state: FilterState, y1) -> np.ndarray:
    """Increments of the innovations process, (K, ..., m); approximately N(0, dt I)."""
    _, isq = _sym_sqrt(model.SigmaSigmaT)
    y1 = np.asarray(y1, dtype=float)
    dt = np.diff(state.t_grid).reshape((-1,) + (1,) * (y1.ndim - 1))
    resid = np.diff(y1, axis=0) - state.x_hat[:-1] @ model.A_hat.T * dt
    return resid @ isq.T


def reduced_model(model: MarketModel, t_grid, P) -> MarketModel:
    """Fully observed model for the filter mean: factor loading
    (Lambda Sigma' + P A_hat')(Sigma Sigma')^{-1/2}, asset loading (Sigma Sigma')^{1/2},
    noise dimension m, unchanged jumps."""
    sq, isq = _sym_sqrt(model.SigmaSigmaT)
    LS = model.Lambda @ model.Sigma.T
    table = np.einsum("kij,jl->kil", LS + P @ model.A_hat.T, isq)
    return MarketModel(b=model.b, B=model.B, Lambda=table[0], a0=model.a0, A0=model.A0,
                       a=model.a, A=model.A, Sigma=sq, jumps=model.jumps,
                       lambda_table=(np.asarray(t_grid, dtype=float), table))


def sample_prior(params: FilterParams, num: int, seed: int) -> np.ndarray:
    """Draws of X(0) from N(m0, P0), shape (num, n)."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(4,))))
    w, V = np.linalg.eigh(params.P0)
    root = V * np.sqrt(np.clip(w, 0.0, None))
    return params.m0 + rng.standard_normal((num, params.m0.size)) @ root.T


def write_filter_csv(path, state: FilterState, path_index: int = 0) -> None:
    """Columns t, x_hat1..n, then P entries P11, P12, ... row-major."""
    n = state.P.shape[1]
    xh = state.x_hat if state.x_hat.ndim == 2 else state.x_hat[:, path_index]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x_hat{i + 1}" for i in range(n)]
                   + [f"P{i + 1}{j + 1}" for i in range(n) for j in range(n)])
        for k, t in enumerate(state.t_grid):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in xh[k]]
                       + [repr(float(v)) for v in state.P[k].ravel()])
