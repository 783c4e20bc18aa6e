"""Path simulation under the physical and the changed measure, and the
statistical oracles built on it.

Randomness: paths are grouped in fixed blocks of ``block_size``; block ``b`` of
stream ``s`` draws from ``Philox(SeedSequence(seed, spawn_key=(s, b)))`` and always
draws a full block before truncation, so the first N paths of any run are
bit-identical to an N-path run with the same seed.
"""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import scipy.linalg
from scipy.interpolate import RegularGridInterpolator

from .criterion import Criterion, g_values
from .model import MarketModel, margins

STREAM_PHYSICAL, STREAM_CHANGED, STREAM_FK = 0, 1, 2


class InfeasiblePolicyOnPath(RuntimeError):
    pass


@dataclass(frozen=True)
class PathConfig:
    num_paths: int = 10_000
    dt: float = 0.01
    seed: int = 0
    scheme: str = "euler"        # or "exact_ou"
    horizon: float = 1.0
    t0: float = 0.0
    block_size: int = 2048
    workers: int = 1             # 0 = one per CPU

    def __post_init__(self):
        if self.num_paths < 1:
            raise ValueError("num_paths must be at least 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.scheme not in ("euler", "exact_ou"):
            raise ValueError(f"unknown factor scheme {self.scheme!r}")
        if self.block_size < 1:
            raise ValueError("block_size must be positive")

    @property
    def steps(self) -> int:
        return max(1, int(np.ceil(self.horizon / self.dt - 1e-9)))

    @property
    def step(self) -> float:
        """Actual step: horizon split into an integer number of equal steps."""
        return self.horizon / self.steps

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class PathStats:
    mean: float
    std_error: float
    num_paths: int
    estimator_name: str

    def record(self, cfg: PathConfig, **extra) -> dict:
        return {"estimator": self.estimator_name, "mean": self.mean, "std_error": self.std_error,
                "num_paths": self.num_paths, "seed": cfg.seed, "config_hash": cfg.digest(), **extra}


def path_stats(samples: np.ndarray, name: str) -> PathStats:
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    if np.all(samples == samples[0]):
        return PathStats(float(samples[0]), 0.0, n, name)
    se = float(np.std(samples, ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    return PathStats(float(np.mean(samples)), se, n, name)


# -- policies -----------------------------------------------------------------

class ConstantPolicy:
    def __init__(self, h):
        self.h = np.atleast_1d(np.asarray(h, dtype=float))

    def __call__(self, t, X):
        return np.broadcast_to(self.h, X.shape[:-1] + self.h.shape)


class GridPolicy:
    """Multilinear interpolation of a solved policy field in (t, x), clamped to the box."""

    def __init__(self, value_field):
        grid = value_field.grid
        self.lo = grid.center - grid.half_width
        self.hi = grid.center + grid.half_width
        self.t0, self.T = grid.t0, grid.T
        self._interp = RegularGridInterpolator((grid.times, *grid.axes), value_field.policy)

    def __call__(self, t, X):
        tt = np.clip(t, self.t0, self.T)
        Xc = np.clip(X, self.lo, self.hi)
        pts = np.concatenate([np.full(Xc.shape[:-1] + (1,), tt), Xc], axis=-1)
        return self._interp(pts)


class CallablePolicy:
    def __init__(self, fn: Callable, m: int):
        self.fn, self.m = fn, m

    def __call__(self, t, X):
        return np.asarray(self.fn(t, X), dtype=float).reshape(X.shape[:-1] + (self.m,))


def as_policy(policy, model: MarketModel):
    if isinstance(policy, (ConstantPolicy, GridPolicy, CallablePolicy)):
        return policy
    if callable(policy):
        return CallablePolicy(policy, model.m)
    if hasattr(policy, "policy") and hasattr(policy, "grid"):
        return GridPolicy(policy)
    return ConstantPolicy(np.broadcast_to(np.asarray(policy, dtype=float), (model.m,)))


def _constant_cost(model, criterion, h):
    """(g(0, h), beta) with g(x, h) = g(0, h) - beta'x; tiny beta is snapped to 0."""
    g0 = float(g_values(model, criterion, np.zeros(model.n), h))
    beta = model.A0 + model.A_hat.T @ h
    scale = np.abs(model.A0) + np.abs(model.A_hat.T) @ np.abs(h)
    beta = np.where(np.abs(beta) <= 1e-13 * np.maximum(scale, 1e-300), 0.0, beta)
    return g0, beta


def _cost(model, criterion, pol, X, H):
    if isinstance(pol, ConstantPolicy):
        g0, beta = _constant_cost(model, criterion, pol.h)
        return g0 - X @ beta if np.any(beta) else np.full(X.shape[0], g0)
    return g_values(model, criterion, X, H)


# -- random streams and factor stepping ----------------------------------------

def _rng(seed: int, stream: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(stream, block))
    return np.random.Generator(np.random.Philox(ss))


def _max_workers(cfg: PathConfig) -> int:
    """Worker threads: cfg.workers (0 = auto), capped by RISKJUMP_THREADS (0 = auto)."""
    auto = os.cpu_count() or 1
    cap = int(os.environ.get("RISKJUMP_THREADS", "0") or 0) or auto
    return max(1, min(cfg.workers or auto, cap))


def _map_blocks(fn, cfg: PathConfig) -> list:
    nblocks = -(-cfg.num_paths // cfg.block_size)
    sizes = [min(cfg.block_size, cfg.num_paths - b * cfg.block_size) for b in range(nblocks)]
    workers = _max_workers(cfg)
    if workers == 1 or nblocks == 1:
        return [fn(b, s) for b, s in enumerate(sizes)]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(fn, range(nblocks), sizes))


@dataclass(frozen=True)
class _OUStep:
    """Exact OU transition over dt, jointly with the Brownian increment."""
    F: np.ndarray       # e^{B dt}
    c: np.ndarray       # int_0^dt e^{Bu} du b
    K: np.ndarray       # regression of the stochastic integral on dW: (n, M)
    L: np.ndarray       # square root of the conditional covariance: (n, n)


def _ou_step(B, b, Lam, dt) -> _OUStep:
    n, M = Lam.shape
    F = scipy.linalg.expm(B * dt)
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n], aug[:n, n] = B, b
    c = scipy.linalg.expm(aug * dt)[:n, n]
    aug = np.zeros((2 * n, 2 * n))
    aug[:n, :n], aug[:n, n:] = B, np.eye(n)
    I1 = scipy.linalg.expm(aug * dt)[:n, n:]          # int_0^dt e^{Bu} du
    cross = I1 @ Lam                                    # Cov(xi, dW)
    vl = np.zeros((2 * n, 2 * n))
    vl[:n, :n], vl[:n, n:], vl[n:, n:] = -B, Lam @ Lam.T, B.T
    E = scipy.linalg.expm(vl * dt)
    cov = E[n:, n:].T @ E[:n, n:]
    cond = cov - cross @ cross.T / dt
    cond = 0.5 * (cond + cond.T)
    w, V = np.linalg.eigh(cond)
    L = V * np.sqrt(np.clip(w, 0.0, None))
    return _OUStep(F, c, cross / dt, L)


class _FactorStepper:
    def __init__(self, model: MarketModel, cfg: PathConfig):
        self.model, self.cfg = model, cfg
        self._cache: dict[float, _OUStep] = {}

    def __call__(self, t, X, dW, rng, drift=None):
        """Advance X over one step; ``drift`` replaces b + BX (changed measure)."""
        m, dt = self.model, self.cfg.step
        Lam = m.Lambda_at(t)
        if self.cfg.scheme == "euler" or drift is not None:
            base = m.b + X @ m.B.T if drift is None else drift
            return X + base * dt + dW @ Lam.T
        key = float(t) if m.time_varying else 0.0
        st = self._cache.get(key)
        if st is None:
            st = self._cache[key] = _ou_step(m.B, m.b, Lam, dt)
        Z = rng.standard_normal((X.shape[0], m.n))
        return X @ st.F.T + st.c + dW @ st.K.T + Z @ st.L.T


# -- physical measure ------------------------------------------------------------

@dataclass
class PhysicalPaths:
    times: np.ndarray
    log_wealth: np.ndarray          # (N,) terminal ln V
    log_density: np.ndarray         # (N,) terminal ln chi
    theta_int_g: np.ndarray         # (N,) theta * int g(X, h) dt, left-point rule
    jump_counts: np.ndarray         # (N, J) arrivals per atom
    X_terminal: np.ndarray          # (N, n)
    X: np.ndarray | None = None     # (steps+1, N, n) when recorded
    log_wealth_path: np.ndarray | None = None
    log_price: np.ndarray | None = None   # (steps+1, N, m) discounted log prices, starting at 0
    step_counts: np.ndarray | None = None  # (steps, N, J) arrivals per step and atom


def _initial_states(x0, n, cfg):
    """A common start point (n,) or one start point per path (num_paths, n)."""
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 2:
        if x0.shape != (cfg.num_paths, n):
            raise ValueError(f"per-path start points must have shape ({cfg.num_paths}, {n})")
        return x0
    return np.broadcast_to(np.broadcast_to(x0, (n,)), (cfg.num_paths, n))


def _check_margins(model, H, t, X):
    if len(model.jumps) == 0:
        return
    mg = margins(model, H).min(axis=-1)
    bad = np.flatnonzero(~(mg > 0))
    if bad.size:
        i = bad[0]
        raise InfeasiblePolicyOnPath(
            f"policy {H[i].tolist()} has margin {mg[i]:.3g} at t={t:.6g}, x={X[i].tolist()}")


def simulate_physical(model: MarketModel, criterion: Criterion, policy, x0, horizon: float | None = None,
                      cfg: PathConfig = PathConfig(), record_paths: bool = False) -> PhysicalPaths:
    """Simulate the factor, log wealth and log density under the physical measure.

    The same Brownian increment drives the factor and the assets; jump counts
    per step are Poisson per atom, which for a step-wise constant control gives
    the same law as applying each arrival at its exact time.
    """
    if horizon is not None:
        cfg = PathConfig(**{**asdict(cfg), "horizon": float(horizon)})
    pol = as_policy(policy, model)
    th = criterion.theta
    x0 = _initial_states(x0, model.n, cfg)
    steps, dt = cfg.steps, cfg.step
    times = cfg.t0 + dt * np.arange(steps + 1)
    J = len(model.jumps)
    psi = model.jumps.marks if J else np.zeros((0, model.m))
    lam = model.jumps.intensities if J else np.zeros(0)
    comp = model.jumps.compensated if J else np.zeros(0, dtype=bool)
    stepper = _FactorStepper(model, cfg)
    Mdim = model.noise_dim
    ln_v = np.log(criterion.v)

    def block(b, size):
        rng = _rng(cfg.seed, STREAM_PHYSICAL, b)
        B = cfg.block_size
        X = x0[b * B: b * B + size].copy()
        lnV = np.full(size, ln_v)
        lnchi = np.zeros(size)
        intg = np.zeros(size)
        counts = np.zeros((size, J), dtype=np.int64)
        rec = None
        if record_paths:
            rec = (np.empty((steps + 1, size, model.n)), np.empty((steps + 1, size)),
                   np.empty((steps + 1, size, model.m)), np.empty((steps, size, J), dtype=np.int64))
            rec[0][0], rec[1][0], rec[2][0] = X, lnV, 0.0
        for k in range(steps):
            t = times[k]
            H = np.asarray(pol(t, X), dtype=float)
            _check_margins(model, H, t, X)
            dW = np.sqrt(dt) * rng.standard_normal((B, Mdim))[:size]
            n_k = rng.poisson(lam * dt, size=(B, J))[:size] if J else np.zeros((size, 0))
            shock = dW @ model.Sigma.T                                   # (size, m)
            hSh = np.einsum("bi,ij,bj->b", H, model.SigmaSigmaT, H)
            hdW = np.einsum("bi,bi->b", H, shock)
            drift = model.a0 + X @ model.A0 + np.einsum("bi,bi->b", H, model.a_hat + X @ model.A_hat.T)
            lnV += (drift - 0.5 * hSh) * dt + hdW
            lnchi += -th * hdW - 0.5 * th ** 2 * hSh * dt
            if J:
                u = H @ psi.T
                lu = np.log1p(u)
                G = -np.expm1(-th * lu)
                jl = np.einsum("bj,bj->b", n_k, lu)
                lnV += jl - dt * (u[:, comp] @ lam[comp])
                lnchi += -th * jl + dt * (G @ lam)
                counts += n_k.astype(np.int64)
            intg += th * _cost(model, criterion, pol, X, H) * dt
            if rec is not None:
                # discounted log price: (a_hat + A_hat x - diag(S)/2) dt + dW Sigma' + jumps
                dlp = (model.a_hat + X @ model.A_hat.T - 0.5 * np.diag(model.SigmaSigmaT)) * dt + shock
                if J:
                    dlp += n_k @ np.log1p(psi) - dt * (lam[comp] @ psi[comp])
                rec[2][k + 1] = rec[2][k] + dlp
                rec[3][k] = n_k
            X = stepper(t, X, dW, rng)
            if rec is not None:
                rec[0][k + 1], rec[1][k + 1] = X, lnV
        return lnV, lnchi, intg, counts, X, rec

    parts = _map_blocks(block, cfg)
    cat = lambda i: np.concatenate([p[i] for p in parts])
    out = PhysicalPaths(times, cat(0), cat(1), cat(2), cat(3), cat(4))
    if record_paths:
        out.X = np.concatenate([p[5][0] for p in parts], axis=1)
        out.log_wealth_path = np.concatenate([p[5][1] for p in parts], axis=1)
        out.log_price = np.concatenate([p[5][2] for p in parts], axis=1)
        out.step_counts = np.concatenate([p[5][3] for p in parts], axis=1)
    return out


@dataclass(frozen=True)
class ValueEstimate:
    criterion: PathStats     # J = -(1/theta) ln E[V^{-theta}]
    raw: PathStats           # E[V^{-theta}], comparable with phi_tilde


def estimate_value_direct(model: MarketModel, criterion: Criterion, policy, x0,
                          cfg: PathConfig = PathConfig()) -> ValueEstimate:
    """Plug-in estimate of the risk-sensitive criterion with a delta-method standard error."""
    paths = simulate_physical(model, criterion, policy, x0, cfg=cfg)
    th = criterion.theta
    raw = path_stats(np.exp(-th * paths.log_wealth), "direct_raw_mean")
    J = -np.log(raw.mean) / th
    se = raw.std_error / (th * raw.mean)
    return ValueEstimate(PathStats(float(J), float(se), raw.num_paths, "direct_criterion"), raw)


def martingale_check(model: MarketModel, criterion: Criterion, policy,
                     cfg: PathConfig = PathConfig(), x0=None) -> PathStats:
    """Mean of the Doleans density at the horizon; should equal 1."""
    x0 = np.zeros(model.n) if x0 is None else x0
    paths = simulate_physical(model, criterion, policy, x0, cfg=cfg)
    return path_stats(np.exp(paths.log_density), "doleans_mean")


def martingale_passes(stats: PathStats, k: float = 3.0) -> bool:
    return abs(stats.mean - 1.0) <= k * stats.std_error


# -- changed measure ------------------------------------------------------------

def simulate_changed_measure(model: MarketModel, criterion: Criterion, policy, x0,
                             cfg: PathConfig = PathConfig()) -> PathStats:
    """Estimate E^h[exp(theta int g dt)] v^{-theta} with the factor driven by the
    changed-measure drift and no jumps."""
    pol = as_policy(policy, model)
    th = criterion.theta
    x0 = _initial_states(x0, model.n, cfg)
    steps, dt = cfg.steps, cfg.step
    times = cfg.t0 + dt * np.arange(steps + 1)
    Mdim = model.noise_dim
    LS_cache = {}

    def block(b, size):
        rng = _rng(cfg.seed, STREAM_CHANGED, b)
        B = cfg.block_size
        X = x0[b * B: b * B + size].copy()
        intg = np.zeros(size)
        for k in range(steps):
            t = times[k]
            H = np.asarray(pol(t, X), dtype=float)
            _check_margins(model, H, t, X)
            intg += _cost(model, criterion, pol, X, H) * dt
            dW = np.sqrt(dt) * rng.standard_normal((B, Mdim))[:size]
            key = float(t) if model.time_varying else 0.0
            if key not in LS_cache:
                LS_cache[key] = model.Lambda_at(t) @ model.Sigma.T
            drift = model.b + X @ model.B.T - th * H @ LS_cache[key].T
            X = X + drift * dt + dW @ model.Lambda_at(t).T
        return intg

    intg = np.concatenate(_map_blocks(block, cfg))
    return path_stats(np.exp(th * intg - th * np.log(criterion.v)), "changed_measure")


# -- Feynman-Kac oracle -----------------------------------------------------------

def feynman_kac_oracle(drift: Callable, diffusion: Callable, zero_order: Callable,
                       source: Callable | None, boundary: Callable, box, t: float, x, T: float,
                       cfg: PathConfig = PathConfig(), theta: float = 1.0) -> PathStats:
    """Monte Carlo value of

        u(t, x) = E[ Psi(T ^ tau, X) e^{theta int g} + int ell e^{theta int g} ds ]

    for dX = drift(s, X) ds + diffusion(s) dW started at (t, x) and stopped at
    the first exit tau from ``box = (lo, hi)``.  Exit times are located by
    linear interpolation of the crossing inside a step.

    Rules are vectorised: drift(s, X) -> (B, n), diffusion(s) -> (n, M),
    zero_order(s, X) -> (B,), source(s, X) -> (B,), boundary(s, X) -> (B,).
    """
    lo, hi = (np.asarray(v, dtype=float) for v in box)
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if not (np.all(x > lo) and np.all(x < hi)):
        raise ValueError("start point must lie inside the box")
    horizon = T - t
    steps = max(1, int(np.ceil(horizon / cfg.dt - 1e-9)))
    dt = horizon / steps
    M = np.atleast_2d(diffusion(t)).shape[1]

    def block(b, size):
        rng = _rng(cfg.seed, STREAM_FK, b)
        B = cfg.block_size
        X = np.tile(x, (size, 1))
        logE = np.zeros(size)
        acc = np.zeros(size)
        alive = np.ones(size, dtype=bool)
        value = np.zeros(size)
        for k in range(steps):
            s = t + k * dt
            dW = np.sqrt(dt) * rng.standard_normal((B, M))[:size]
            idx = np.flatnonzero(alive)
            if idx.size == 0:
                continue
            Xa = X[idx]
            Xn = Xa + drift(s, Xa) * dt + dW[idx] @ np.atleast_2d(diffusion(s)).T
            # fraction of the step spent inside the box
            with np.errstate(divide="ignore", invalid="ignore"):
                a_hi = np.where(Xn >= hi, (hi - Xa) / (Xn - Xa), 1.0)
                a_lo = np.where(Xn <= lo, (lo - Xa) / (Xn - Xa), 1.0)
            alpha = np.clip(np.minimum(a_hi, a_lo).min(axis=1), 0.0, 1.0)
            exited = alpha < 1.0
            ga = zero_order(s, Xa)
            if source is not None:
                acc[idx] += source(s, Xa) * np.exp(logE[idx]) * alpha * dt
            logE[idx] += theta * ga * alpha * dt
            X[idx] = Xa + alpha[:, None] * (Xn - Xa)
            if exited.any():
                e = idx[exited]
                value[e] = boundary(s + alpha[exited] * dt, X[e]) * np.exp(logE[e])
                alive[e] = False
        if alive.any():
            a = np.flatnonzero(alive)
            value[a] = boundary(T, X[a]) * np.exp(logE[a])
        return value + acc

    return path_stats(np.concatenate(_map_blocks(block, cfg)), "feynman_kac")
