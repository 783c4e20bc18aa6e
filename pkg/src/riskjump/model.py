"""Market model data and validation of the standing assumptions.

All coefficients are stored as float64 numpy arrays with fixed shapes:

    b (n,), B (n, n), Lambda (n, M), A0 (n,), a (m,), A (m, n), Sigma (m, M)

A model produced by the partial-observation reduction carries a tabulated
time-varying factor loading in ``lambda_table``; in that case the noise
dimension is m instead of n + m.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.optimize
import scipy.spatial


class ModelError(ValueError):
    """Base class for model validation failures."""


class DimensionMismatch(ModelError):
    pass


class SigmaNotPositiveDefinite(ModelError):
    pass


class JumpSignCoverageViolated(ModelError):
    pass


class MarkBelowMinusOne(ModelError):
    pass


class InfeasibleControl(ValueError):
    """A control violates 1 + h'psi > 0 for some jump atom."""


@dataclass(frozen=True)
class JumpAtom:
    mark: np.ndarray
    intensity: float
    compensated: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mark", np.atleast_1d(np.asarray(self.mark, dtype=float)))
        object.__setattr__(self, "intensity", float(self.intensity))
        object.__setattr__(self, "compensated", bool(self.compensated))


@dataclass(frozen=True)
class JumpMeasure:
    """Finite-atom stand-in for the image jump measure.

    ``pure_diffusion`` must be set explicitly to allow an empty atom list.
    """

    atoms: tuple[JumpAtom, ...] = ()
    pure_diffusion: bool = False

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))

    def __len__(self):
        return len(self.atoms)

    @property
    def marks(self) -> np.ndarray:
        """(J, m) array of marks; (0, 0) when empty."""
        if not self.atoms:
            return np.zeros((0, 0))
        return np.vstack([a.mark for a in self.atoms])

    @property
    def intensities(self) -> np.ndarray:
        return np.array([a.intensity for a in self.atoms], dtype=float)

    @property
    def compensated(self) -> np.ndarray:
        return np.array([a.compensated for a in self.atoms], dtype=bool)

    def mark_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinate-wise (gamma_min, gamma_max) over atoms."""
        marks = self.marks
        return marks.min(axis=0), marks.max(axis=0)


def _arr(x, ndim: int) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if ndim == 1:
        return np.atleast_1d(a)
    if ndim == 2:
        a = np.atleast_1d(a)
        return a.reshape(1, -1) if a.ndim == 1 else a
    return a


@dataclass(frozen=True, eq=False)
class MarketModel:
    b: np.ndarray
    B: np.ndarray
    Lambda: np.ndarray
    a0: float
    A0: np.ndarray
    a: np.ndarray
    A: np.ndarray
    Sigma: np.ndarray
    jumps: JumpMeasure
    # (times (K,), values (K, n, noise_dim)); set only for reduced models
    lambda_table: tuple[np.ndarray, np.ndarray] | None = None
    validated: bool = False
    rank_A_hat_is_n: bool | None = None

    def __post_init__(self):
        object.__setattr__(self, "b", _arr(self.b, 1))
        object.__setattr__(self, "A0", _arr(self.A0, 1))
        object.__setattr__(self, "a", _arr(self.a, 1))
        object.__setattr__(self, "a0", float(self.a0))
        n, m = self.b.shape[0], self.a.shape[0]
        B = np.asarray(self.B, dtype=float).reshape(n, n) if np.size(self.B) == n * n else _arr(self.B, 2)
        A = np.asarray(self.A, dtype=float).reshape(m, n) if np.size(self.A) == m * n else _arr(self.A, 2)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Lambda", _arr(self.Lambda, 2))
        object.__setattr__(self, "Sigma", _arr(self.Sigma, 2))
        if self.lambda_table is not None:
            times, values = self.lambda_table
            object.__setattr__(
                self, "lambda_table",
                (np.asarray(times, dtype=float), np.asarray(values, dtype=float)),
            )

    @property
    def n(self) -> int:
        return self.b.shape[0]

    @property
    def m(self) -> int:
        return self.a.shape[0]

    @property
    def noise_dim(self) -> int:
        return self.Sigma.shape[1]

    @property
    def a_hat(self) -> np.ndarray:
        return self.a - self.a0 * np.ones(self.m)

    @property
    def A_hat(self) -> np.ndarray:
        return self.A - np.outer(np.ones(self.m), self.A0)

    @property
    def SigmaSigmaT(self) -> np.ndarray:
        return self.Sigma @ self.Sigma.T

    @property
    def time_varying(self) -> bool:
        return self.lambda_table is not None

    def Lambda_at(self, t: float) -> np.ndarray:
        """Factor diffusion loading at time t (linear interpolation in a table)."""
        if self.lambda_table is None:
            return self.Lambda
        times, values = self.lambda_table
        t = float(np.clip(t, times[0], times[-1]))
        k = int(np.searchsorted(times, t, side="right")) - 1
        k = min(max(k, 0), len(times) - 2)
        w = (t - times[k]) / (times[k + 1] - times[k])
        return (1.0 - w) * values[k] + w * values[k + 1]

    def without_jumps(self) -> "MarketModel":
        return replace(self, jumps=JumpMeasure((), pure_diffusion=True), validated=False,
                       rank_A_hat_is_n=None)

    def with_(self, **changes) -> "MarketModel":
        """Copy with some coefficients replaced; the copy must be re-validated."""
        return replace(self, validated=False, rank_A_hat_is_n=None, **changes)


def check_model(raw: MarketModel) -> list[ModelError]:
    """Return every assumption violated by ``raw`` (empty list when valid)."""
    errors: list[ModelError] = []
    n, m = raw.n, raw.m
    M = raw.noise_dim
    shapes = {
        "B": (raw.B.shape, (n, n)),
        "A0": (raw.A0.shape, (n,)),
        "A": (raw.A.shape, (m, n)),
        "Lambda": (raw.Lambda.shape, (n, M)),
    }
    for name, (got, want) in shapes.items():
        if got != want:
            errors.append(DimensionMismatch(f"{name} has shape {got}, expected {want}"))
    if raw.lambda_table is None and M != n + m:
        errors.append(DimensionMismatch(f"noise dimension {M} != n + m = {n + m}"))
    if raw.lambda_table is not None:
        times, values = raw.lambda_table
        if values.shape != (len(times), n, M) or len(times) < 2 or np.any(np.diff(times) <= 0):
            errors.append(DimensionMismatch(
                f"lambda_table values {values.shape} incompatible with {len(times)} times and (n, M) = ({n}, {M})"))
    for atom in raw.jumps.atoms:
        if atom.mark.shape != (m,):
            errors.append(DimensionMismatch(f"jump mark has shape {atom.mark.shape}, expected ({m},)"))
    if errors:
        return errors

    S = raw.SigmaSigmaT
    eig = np.linalg.eigvalsh(0.5 * (S + S.T))
    trace = float(np.trace(S))
    if trace <= 0 or eig[0] <= 1e-12 * trace / m:
        errors.append(SigmaNotPositiveDefinite(
            f"smallest eigenvalue of Sigma Sigma' is {eig[0]:.3e} (trace {trace:.3e})"))

    for j, atom in enumerate(raw.jumps.atoms):
        if atom.intensity <= 0:
            errors.append(ModelError(f"atom {j} has non-positive intensity {atom.intensity}"))
        if np.any(atom.mark < -1.0):
            errors.append(MarkBelowMinusOne(f"atom {j} has mark {atom.mark.tolist()} below -1"))

    if len(raw.jumps) == 0:
        if not raw.jumps.pure_diffusion:
            errors.append(JumpSignCoverageViolated(
                "no jump atoms given; set pure_diffusion to request the jump-free model"))
    else:
        lo, hi = raw.jumps.mark_bounds()
        for i in range(m):
            if not (lo[i] < 0.0 < hi[i]):
                errors.append(JumpSignCoverageViolated(
                    f"asset {i} needs atoms with both negative and positive marks "
                    f"(range [{lo[i]}, {hi[i]}])"))
    return errors


def validate_model(raw: MarketModel) -> MarketModel:
    """Validate the assumptions and return a copy flagged as validated.

    Raises the first detected :class:`ModelError`; the full list is attached
    as ``exc.all_errors``.
    """
    errors = check_model(raw)
    if errors:
        exc = errors[0]
        exc.all_errors = errors
        raise exc
    s = np.linalg.svd(raw.A_hat, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(s > 1e-10 * s[0]))
    return replace(raw, validated=True, rank_A_hat_is_n=rank == raw.n)


def feasible_margin(model: MarketModel, h: Sequence[float] | np.ndarray) -> float:
    """min_j (1 + h'psi_j); h is admissible iff the result is positive."""
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if h.shape != (model.m,):
        raise DimensionMismatch(f"h has shape {h.shape}, expected ({model.m},)")
    if len(model.jumps) == 0:
        return float("inf")
    return float(np.min(1.0 + model.jumps.marks @ h))


def margins(model: MarketModel, H: np.ndarray) -> np.ndarray:
    """Vectorised atom margins: H (..., m) -> (..., J)."""
    if len(model.jumps) == 0:
        return np.full(np.shape(H)[:-1] + (0,), np.inf)
    return 1.0 + np.asarray(H) @ model.jumps.marks.T


def feasible_vertices(model: MarketModel) -> np.ndarray | None:
    """Vertices (V, m) of the closure of the admissible polytope, or None when
    the set is unbounded (in particular for jump-free models)."""
    if len(model.jumps) == 0:
        return None
    psi = model.jumps.marks
    m = model.m
    if m == 1:
        col = psi[:, 0]
        if not (np.any(col > 0) and np.any(col < 0)):
            return None
        lo = np.max(-1.0 / col[col > 0])
        hi = np.min(-1.0 / col[col < 0])
        return np.array([[lo], [hi]])
    # bounded iff every coordinate is bounded in both directions
    A_ub, b_ub = -psi, np.ones(len(psi))
    for i in range(m):
        for sgn in (1.0, -1.0):
            res = scipy.optimize.linprog(-sgn * np.eye(m)[i], A_ub=A_ub, b_ub=b_ub,
                                         bounds=[(None, None)] * m, method="highs")
            if res.status != 0:
                return None
    # halfspaces as  -psi h - 1 <= 0 ; h = 0 is strictly interior
    hs = np.hstack([-psi, -np.ones((len(psi), 1))])
    return scipy.spatial.HalfspaceIntersection(hs, np.zeros(m)).intersections
