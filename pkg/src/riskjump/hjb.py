"""Policy-improvement solver for the exponentially transformed HJB equation
on a bounded box (n = 1 or 2).

The linear equation solved for a fixed feedback policy h is

    u_t + 1/2 tr(Lambda Lambda' D^2 u) + f(t, x, h)' Du + theta g(x, h) u = 0,

with terminal value v^{-theta} and lateral value v^{-theta} exp(theta g0 (T - t)),
g0 being the constant cost of the boundary zero-beta policy.  Internally the
unknown is scaled as w = u exp(-theta g0 (T - t)), so the lateral and terminal
data are the constant v^{-theta} and the reaction coefficient becomes
theta (g - g0).  The zero-beta policy then reproduces its exponential exactly.

Policy updates minimise exactly the discrete operator row at each node (with
central drift differences), so the iterates decrease monotonically whenever
the implicit matrices are M-matrices.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .criterion import Criterion, effective_drift, g_values
from .model import MarketModel, feasible_vertices
from .optimizer import (NewtonConfig, NoConvergence, ZeroBetaPolicy, linear_coefficient,
                        maximize_inner_batch, zero_beta)


class LinearSolveFailure(RuntimeError):
    pass


class NonPositiveValue(RuntimeError):
    pass


class NoPolicyConvergence(RuntimeError):
    def __init__(self, msg, field=None):
        super().__init__(msg)
        self.field = field


@dataclass(frozen=True)
class Grid:
    dim: int
    center: np.ndarray
    half_width: np.ndarray
    nodes_per_axis: int
    t0: float
    T: float
    time_steps: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"the grid solver supports n = 1 or 2, got n = {self.dim}")
        c = np.broadcast_to(np.asarray(self.center, dtype=float), (self.dim,)).copy()
        R = np.broadcast_to(np.asarray(self.half_width, dtype=float), (self.dim,)).copy()
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_width", R)
        if np.any(R <= 0):
            raise ValueError("half_width must be positive")
        if self.nodes_per_axis < 16 or self.time_steps < 16:
            raise ValueError("need at least 16 nodes per axis and 16 time steps")
        if not self.T > self.t0:
            raise ValueError("need T > t0")

    @property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(c - r, c + r, self.nodes_per_axis)
                for c, r in zip(self.center, self.half_width)]

    @property
    def spacing(self) -> np.ndarray:
        return 2.0 * self.half_width / (self.nodes_per_axis - 1)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.t0, self.T, self.time_steps + 1)

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.time_steps

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.nodes_per_axis,) * self.dim

    @property
    def points(self) -> np.ndarray:
        """Node coordinates, shape (N, ..., N, n)."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    @property
    def interior(self) -> tuple[slice, ...]:
        return (slice(1, -1),) * self.dim

    def refined(self, factor: int = 2) -> "Grid":
        return Grid(self.dim, self.center, self.half_width,
                    factor * (self.nodes_per_axis - 1) + 1, self.t0, self.T,
                    factor * self.time_steps)


@dataclass(frozen=True)
class SolverConfig:
    policy_tol: float = 1e-8          # relative to v^{-theta}
    max_policy_iters: int = 50
    time_scheme: float = 1.0          # implicit weight: 1 = fully implicit, 0.5 = Crank-Nicolson
    drift_scheme: str = "monotone"    # "monotone", "hybrid", "upwind" or "central"
    newton: NewtonConfig = NewtonConfig()
    zero_beta_select: str = "min_cost"
    initial_policy: str = "zero_beta"  # or "zero"

    def __post_init__(self):
        if not 0.5 <= self.time_scheme <= 1.0:
            raise ValueError("time_scheme must lie in [0.5, 1]")
        if self.drift_scheme not in ("monotone", "hybrid", "upwind", "central"):
            raise ValueError(f"unknown drift scheme {self.drift_scheme!r}")
        if self.initial_policy not in ("zero_beta", "zero"):
            raise ValueError(f"unknown initial policy {self.initial_policy!r}")


@dataclass
class ValueField:
    grid: Grid
    phi_tilde: np.ndarray   # (K+1, N, ...)
    phi: np.ndarray
    policy: np.ndarray      # (K+1, N, ..., m)
    zero_beta: ZeroBetaPolicy
    theta: float
    v: float
    diagnostics: dict = field(default_factory=dict)

    def upper_bound(self) -> np.ndarray:
        """v^{-theta} exp(theta g0 (T - t)) broadcast over the grid."""
        tau = self.grid.T - self.grid.times
        b = self.v ** (-self.theta) * np.exp(self.theta * self.zero_beta.g_check * tau)
        return b.reshape((-1,) + (1,) * self.grid.dim)


def boundary_value(criterion: Criterion, zb: ZeroBetaPolicy, t, T: float):
    """Lateral datum v^{-theta} exp(theta g0 (T - t)); equals v^{-theta} at t = T."""
    return criterion.terminal_value * np.exp(criterion.theta * zb.g_check * (T - np.asarray(t, dtype=float)))


def _shifted(W: np.ndarray, offset) -> np.ndarray:
    return W[tuple(slice(1 + o, W.shape[d] - 1 + o) for d, o in enumerate(offset))]


def _unit(n, d, s=1):
    e = [0] * n
    e[d] = s
    return tuple(e)


def _stencil(grid: Grid, a: np.ndarray, f: np.ndarray, r: np.ndarray, scheme: str,
             extra: np.ndarray | None = None):
    """Discrete generator at interior nodes.

    a: (n, n) = Lambda Lambda' / 2; f: interior drift (..., n); r: interior reaction;
    extra: optional artificial diffusion (..., n) added to the diagonal of a.
    Returns ({offset: coefficient array}, centre coefficient array).
    """
    n = grid.dim
    dx = grid.spacing
    centre = r.astype(float).copy()
    coeffs: dict[tuple, np.ndarray] = {}
    for d in range(n):
        diff = a[d, d] / dx[d] ** 2
        if extra is not None:
            diff = diff + extra[..., d] / dx[d] ** 2
        fd = f[..., d]
        if scheme == "central":
            up = np.zeros(fd.shape, dtype=bool)
        elif scheme == "upwind":
            up = np.ones(fd.shape, dtype=bool)
        else:
            up = np.abs(fd) * dx[d] > 2.0 * a[d, d]
        plus = np.where(up, np.maximum(fd, 0.0) / dx[d], fd / (2 * dx[d]))
        minus = np.where(up, -np.minimum(fd, 0.0) / dx[d], -fd / (2 * dx[d]))
        coeffs[_unit(n, d, 1)] = coeffs.get(_unit(n, d, 1), 0.0) + diff + plus
        coeffs[_unit(n, d, -1)] = coeffs.get(_unit(n, d, -1), 0.0) + diff + minus
        centre = centre - 2.0 * diff - np.where(up, np.abs(fd) / dx[d], 0.0)
    for d, e in itertools.combinations(range(n), 2):
        cross = a[d, e] / (2.0 * dx[d] * dx[e])
        if cross == 0.0:
            continue
        for sd, se in itertools.product((1, -1), repeat=2):
            off = [0] * n
            off[d], off[e] = sd, se
            coeffs[tuple(off)] = coeffs.get(tuple(off), 0.0) + sd * se * cross * np.ones_like(centre)
    coeffs = {k: np.broadcast_to(v, centre.shape) for k, v in coeffs.items()}
    return coeffs, centre


def _apply(coeffs, centre, W):
    out = centre * W[(slice(1, -1),) * W.ndim]
    for off, c in coeffs.items():
        out = out + c * _shifted(W, off)
    return out


def _implicit_solve(grid: Grid, coeffs, centre, scale: float, rhs: np.ndarray) -> np.ndarray:
    """Solve (I - scale L) w = rhs for interior unknowns (boundary terms already in rhs)."""
    if grid.dim == 1:
        N = rhs.shape[0]
        ab = np.zeros((3, N))
        ab[0, 1:] = -scale * coeffs[(1,)][:-1]
        ab[1] = 1.0 - scale * centre
        ab[2, :-1] = -scale * coeffs[(-1,)][1:]
        try:
            return scipy.linalg.solve_banded((1, 1), ab, rhs)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise LinearSolveFailure(str(exc)) from exc
    shape = rhs.shape
    idx = np.arange(rhs.size).reshape(shape)
    rows, cols, vals = [idx.ravel()], [idx.ravel()], [(1.0 - scale * centre).ravel()]
    for off, c in coeffs.items():
        src = tuple(slice(max(0, -o), s - max(0, o)) for o, s in zip(off, shape))
        dst = tuple(slice(max(0, o), s - max(0, -o)) for o, s in zip(off, shape))
        rows.append(idx[src].ravel())
        cols.append(idx[dst].ravel())
        vals.append((-scale * c[src]).ravel())
    A = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(rhs.size, rhs.size))
    try:
        sol = spla.spsolve(A, rhs.ravel())
    except RuntimeError as exc:
        raise LinearSolveFailure(str(exc)) from exc
    if not np.all(np.isfinite(sol)):
        raise LinearSolveFailure("sparse solve produced non-finite values")
    return sol.reshape(shape)


def _artificial_diffusion(model, criterion, grid, t, X, a, vertices):
    """Smallest policy-independent diffusion that keeps the central-difference row
    monotone for every admissible h: max(0, |f|_max dx / 2 - a_dd) per axis."""
    LS = model.Lambda_at(t) @ model.Sigma.T
    shift = -criterion.theta * vertices @ LS.T               # (V, n)
    base = model.b + X @ model.B.T                            # (..., n)
    fmax = np.maximum(np.abs(base + shift.min(axis=0)), np.abs(base + shift.max(axis=0)))
    return np.maximum(0.0, 0.5 * fmax * grid.spacing - np.diag(a))


def _level_coefficients(model, criterion, grid, policy_field, zb, k, scheme, vertices=None):
    t = grid.times[k]
    X = grid.points[grid.interior]
    H = policy_field[k][grid.interior]
    f = effective_drift(model, criterion, t, X, H)
    g = g_values(model, criterion, X, H)
    if not np.all(np.isfinite(g)):
        raise ValueError(f"policy field is infeasible at time {t}")
    r = criterion.theta * (g - zb.g_check)
    Lam = model.Lambda_at(t)
    a = 0.5 * Lam @ Lam.T
    if scheme == "monotone":
        if vertices is None:
            # unbounded admissible set: no policy-independent bound on the drift
            return _stencil(grid, a, f, r, "hybrid")
        extra = _artificial_diffusion(model, criterion, grid, t, X, a, vertices)
        return _stencil(grid, a, f, r, "central", extra)
    return _stencil(grid, a, f, r, scheme)


def _solve_scaled(model, criterion, policy_field, grid, config, zb):
    """Backward march for the scaled unknown w; returns (w, diagnostics)."""
    K, dt, wt = grid.time_steps, grid.dt, config.time_scheme
    wb = criterion.terminal_value
    W = np.empty((K + 1,) + grid.shape)
    W[K] = wb
    boundary = np.zeros(grid.shape)
    boundary[...] = wb
    boundary[grid.interior] = 0.0
    nonmonotone = 0
    vertices = feasible_vertices(model) if config.drift_scheme == "monotone" else None
    prev = _level_coefficients(model, criterion, grid, policy_field, zb, K, config.drift_scheme,
                               vertices)
    for k in range(K - 1, -1, -1):
        coeffs, centre = _level_coefficients(model, criterion, grid, policy_field, zb, k,
                                             config.drift_scheme, vertices)
        nonmonotone += int(sum(np.count_nonzero(c < 0) for c in coeffs.values()))
        nonmonotone += int(np.count_nonzero(1.0 - dt * wt * centre <= 0))
        rhs = W[k + 1][grid.interior].copy()
        if wt < 1.0:
            rhs += dt * (1.0 - wt) * _apply(*prev, W[k + 1])
        rhs += dt * wt * _apply(coeffs, np.zeros_like(centre), boundary)
        W[k] = wb
        W[k][grid.interior] = _implicit_solve(grid, coeffs, centre, dt * wt, rhs)
        prev = (coeffs, centre)
    if not np.all(W > 0):
        bad = np.argwhere(~(W > 0))[0]
        raise NonPositiveValue(
            f"non-positive transformed value at time index {bad[0]}, node {tuple(bad[1:])}; "
            "reduce the time step")
    return W, {"nonmonotone_entries": nonmonotone}


def _scale_factor(criterion, zb, grid):
    tau = grid.T - grid.times
    return np.exp(criterion.theta * zb.g_check * tau).reshape((-1,) + (1,) * grid.dim)


def solve_linear_pde(model: MarketModel, criterion: Criterion, policy_field: np.ndarray,
                     grid: Grid, config: SolverConfig = SolverConfig(),
                     zb: ZeroBetaPolicy | None = None) -> np.ndarray:
    """Transformed value of a fixed feedback policy; returns phi_tilde (K+1, N, ...)."""
    if zb is None:
        zb = zero_beta(model, criterion, config.zero_beta_select, config.newton)
    policy_field = np.asarray(policy_field, dtype=float)
    want = (grid.time_steps + 1,) + grid.shape + (model.m,)
    if policy_field.shape != want:
        policy_field = np.broadcast_to(policy_field, want)
    W, _ = _solve_scaled(model, criterion, policy_field, grid, config, zb)
    return W * _scale_factor(criterion, zb, grid)


def _log_gradient(phi_tilde: np.ndarray, grid: Grid) -> np.ndarray:
    """Central differences of phi_tilde divided by phi_tilde at interior nodes: (K+1, ..., n)."""
    dx = grid.spacing
    inner = (slice(None),) + grid.interior
    u = phi_tilde[inner]
    parts = []
    for d in range(grid.dim):
        plus = phi_tilde[(slice(None),) + tuple(slice(2, None) if e == d else slice(1, -1) for e in range(grid.dim))]
        minus = phi_tilde[(slice(None),) + tuple(slice(None, -2) if e == d else slice(1, -1) for e in range(grid.dim))]
        parts.append((plus - minus) / (2 * dx[d]) / u)
    return np.stack(parts, axis=-1)


def improve_policy(model: MarketModel, criterion: Criterion, phi_tilde: np.ndarray, grid: Grid,
                   config: SolverConfig = SolverConfig(), zb: ZeroBetaPolicy | None = None) -> np.ndarray:
    """Pointwise maximiser of the inner problem with p = D Phi from central differences.

    p is taken as -D phi_tilde / (theta phi_tilde), which makes the update an exact
    minimiser of the discrete operator row.  Lateral nodes get the zero-beta
    policy; terminal interior nodes are optimised too, since the explicit half of
    a Crank-Nicolson step uses them.
    """
    if zb is None:
        zb = zero_beta(model, criterion, config.zero_beta_select, config.newton)
    if not np.all(phi_tilde > 0):
        raise NonPositiveValue("policy improvement needs a positive transformed value")
    K = grid.time_steps
    P = -_log_gradient(phi_tilde, grid) / criterion.theta
    X = grid.points[grid.interior]
    SL = np.stack([model.Sigma @ model.Lambda_at(t).T for t in grid.times])  # (K+1, m, n)
    c = (model.a_hat + X @ model.A_hat.T)[None] - criterion.theta * np.einsum(
        "kmn,k...n->k...m", SL, P)
    flat = c.reshape(-1, model.m)
    try:
        sol = maximize_inner_batch(model, criterion, flat, config.newton)
    except NoConvergence as exc:
        raise NoConvergence(f"policy improvement failed: {exc}") from exc
    out = np.empty((K + 1,) + grid.shape + (model.m,))
    out[...] = zb.h_check
    out[(slice(None),) + grid.interior] = sol.h_star.reshape(c.shape)
    return out


def policy_iteration(model: MarketModel, criterion: Criterion, grid: Grid,
                     config: SolverConfig = SolverConfig()) -> ValueField:
    """Alternate linear solves and pointwise policy updates until the sup-norm
    change of the transformed value drops below ``policy_tol * v^{-theta}``."""
    if model.n != grid.dim:
        raise ValueError(f"grid dimension {grid.dim} does not match n = {model.n}")
    zb = zero_beta(model, criterion, config.zero_beta_select, config.newton)
    K = grid.time_steps
    policy = np.empty((K + 1,) + grid.shape + (model.m,))
    policy[...] = zb.h_check if config.initial_policy == "zero_beta" else 0.0
    tol = config.policy_tol * criterion.terminal_value
    scale = _scale_factor(criterion, zb, grid)
    bound = criterion.terminal_value * scale

    deltas, violations, bound_excess, nonmono = [], [], [], []
    prev = None
    converged = False
    for it in range(1, config.max_policy_iters + 1):
        W, diag = _solve_scaled(model, criterion, policy, grid, config, zb)
        phi_tilde = W * scale
        nonmono.append(diag["nonmonotone_entries"])
        bound_excess.append(float(np.max(phi_tilde - bound)))
        if prev is not None:
            deltas.append(float(np.max(np.abs(phi_tilde - prev))))
            violations.append(float(np.max(phi_tilde - prev)))
            if deltas[-1] <= tol:
                converged = True
                break
        prev = phi_tilde
        policy = improve_policy(model, criterion, phi_tilde, grid, config, zb)

    phi = -np.log(phi_tilde) / criterion.theta
    diagnostics = {
        "iterations": it,
        "converged": converged,
        "deltas": deltas,
        "monotonicity_violations": violations,
        "max_bound_excess": bound_excess,
        "nonmonotone_entries": nonmono,
        "policy_tol": tol,
    }
    vf = ValueField(grid, phi_tilde, phi, policy, zb, criterion.theta, criterion.v, diagnostics)
    if not converged:
        raise NoPolicyConvergence(
            f"policy iteration stopped after {it} iterations with delta "
            f"{deltas[-1] if deltas else float('nan'):.3e} > {tol:.3e}", vf)
    vf.policy = improve_policy(model, criterion, phi_tilde, grid, config, zb)
    vf.diagnostics["hamiltonian_residual"] = hamiltonian_residual(model, criterion, vf)
    vf.diagnostics["hamiltonian_residual_inner"] = hamiltonian_residual(
        model, criterion, vf, edge=grid.nodes_per_axis // 4)
    return vf


def hamiltonian_residual(model: MarketModel, criterion: Criterion, vf: ValueField,
                         edge: int = 0) -> float:
    """Max relative residual of the transformed HJB equation at interior nodes.

    Uses centred time differences (interior time levels), so it measures the
    truncation error of the computed field rather than the discrete equation.
    ``edge`` drops that many extra node layers next to the lateral boundary,
    where the boundary layer is unresolved.
    """
    grid = vf.grid
    K = grid.time_steps
    u = vf.phi_tilde
    th = criterion.theta
    ks = np.arange(1, K)
    ut = (u[2:] - u[:-2]) / (2 * grid.dt)
    inner = (slice(1, K),) + grid.interior
    ui = u[inner]
    P = -_log_gradient(u[1:K], grid) / th
    X = grid.points[grid.interior]
    dx = grid.spacing
    res = ut[(slice(None),) + grid.interior].copy()
    for j, k in enumerate(ks):
        t = grid.times[k]
        Lam = model.Lambda_at(t)
        a = 0.5 * Lam @ Lam.T
        coeffs, centre = _stencil(grid, a, np.zeros(X.shape), np.zeros(X.shape[:-1]), "central")
        res[j] += _apply(coeffs, centre, u[k])
        c = linear_coefficient(model, criterion, X, P[j], t)
        sol = maximize_inner_batch(model, criterion, c.reshape(-1, model.m))
        best = sol.objective.reshape(X.shape[:-1])
        drift0 = model.b + X @ model.B.T
        ham = th * ui[j] * (-np.einsum("...n,...n->...", drift0, P[j])
                            - model.a0 - X @ model.A0 - best)
        res[j] += ham
    rel = np.abs(res) / ui
    if edge:
        rel = rel[(slice(None),) + (slice(edge, -edge),) * grid.dim]
    return float(np.max(rel))


@dataclass(frozen=True)
class ConvexityReport:
    passed: bool
    min_second_difference: float
    worst_location: tuple
    tolerance: float
    midpoint_min_gap: float
    midpoint_worst_pair: tuple
    failures: int


def convexity_report(vf: ValueField, pairs: int = 100, seed: int = 0, edge: int = 0) -> ConvexityReport:
    """Discrete convexity of Phi(t, .) along every axis, plus the midpoint form
    phi_tilde((x1+x2)/2) >= sqrt(phi_tilde(x1) phi_tilde(x2)) at sampled node pairs.

    ``edge`` excludes that many extra node layers next to the lateral boundary.
    """
    grid = vf.grid
    phi, u = vf.phi, vf.phi_tilde
    n, N = grid.dim, grid.nodes_per_axis
    tol = 1e-8 * (1.0 + float(np.max(np.abs(phi))))
    lo, hi = 1 + edge, N - 1 - edge
    if hi - lo < 3:
        raise ValueError(f"edge={edge} leaves fewer than 3 interior nodes per axis")
    sel = (slice(None),) + (slice(lo, hi),) * n
    worst, where = np.inf, ()
    failures = 0
    for d in range(n):
        def sh(o):
            return phi[(slice(None),) + tuple(
                slice(lo + (o if e == d else 0), hi + (o if e == d else 0)) for e in range(n))]
        d2 = sh(1) - 2 * phi[sel] + sh(-1)
        failures += int(np.count_nonzero(d2 < -tol))
        i = np.unravel_index(np.argmin(d2), d2.shape)
        if d2[i] < worst:
            worst = float(d2[i])
            where = (int(i[0]),) + tuple(int(j) + lo for j in i[1:]) + (d,)

    rng = np.random.default_rng(seed)
    utol = 1e-8 * (1.0 + float(np.max(u)))
    gap_min, gap_where = np.inf, ()
    span = hi - lo
    for _ in range(pairs):
        k = int(rng.integers(0, grid.time_steps + 1))
        # distinct nodes with even index differences, so the midpoint is a node
        while True:
            i1 = rng.integers(lo, hi, size=n)
            i2 = lo + (i1 - lo) % 2 + 2 * rng.integers(0, (span - (i1 - lo) % 2 + 1) // 2, size=n)
            if np.any(i1 != i2):
                break
        mid = (i1 + i2) // 2
        gap = u[(k,) + tuple(mid)] - np.sqrt(u[(k,) + tuple(i1)] * u[(k,) + tuple(i2)])
        if gap < -utol:
            failures += 1
        if gap < gap_min:
            gap_min, gap_where = float(gap), (k, tuple(int(i) for i in i1), tuple(int(i) for i in i2))
    return ConvexityReport(failures == 0, worst, where, tol, gap_min, gap_where, failures)
