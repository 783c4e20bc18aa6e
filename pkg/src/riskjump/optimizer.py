"""Inner maximisation of the Hamiltonian over the admissible polytope, and
zero-beta policies.

The objective

    L(x, p, h) = -1/2 (theta+1) h' S h - theta h' Sigma Lambda' p + h'(a_hat + A_hat x)
                 - (1/theta) sum_j lambda_j [(1 + h'psi_j)^{-theta} - 1 + theta h'psi_j 1[comp_j]]

depends on (x, p, t) only through the linear coefficient
``c = a_hat + A_hat x - theta Sigma Lambda(t)' p``, so the solver works on
batches of such coefficients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .criterion import Criterion, g_value, g_values, jump_cost
from .model import InfeasibleControl, MarketModel, feasible_margin, margins


class NoConvergence(RuntimeError):
    pass


class RankDeficient(ValueError):
    pass


class ZeroBetaInfeasible(ValueError):
    pass


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-10
    max_iter: int = 100
    fraction_to_boundary: float = 0.99
    armijo: float = 1e-4


@dataclass(frozen=True)
class InnerSolution:
    h_star: np.ndarray
    objective: float
    grad_norm: float
    margin: float
    iterations: int


@dataclass(frozen=True)
class BatchSolution:
    h_star: np.ndarray       # (B, m)
    objective: np.ndarray    # (B,)
    grad_norm: np.ndarray
    margin: np.ndarray
    iterations: np.ndarray


@dataclass(frozen=True)
class ZeroBetaPolicy:
    h_check: np.ndarray
    g_check: float


def linear_coefficient(model: MarketModel, criterion: Criterion, x, p, t: float = 0.0) -> np.ndarray:
    """c = a_hat + A_hat x - theta Sigma Lambda(t)' p, vectorised over leading axes."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    SL = model.Sigma @ model.Lambda_at(t).T
    return model.a_hat + x @ model.A_hat.T - criterion.theta * p @ SL.T


def _objective(model, criterion, c, H):
    S = model.SigmaSigmaT
    quad = -0.5 * (criterion.theta + 1.0) * np.einsum("...i,ij,...j->...", H, S, H)
    return quad + np.einsum("...i,...i->...", H, c) - jump_cost(model, criterion, H)


def _grad_hess(model, criterion, c, H):
    th = criterion.theta
    S = model.SigmaSigmaT
    grad = -(th + 1.0) * H @ S + c
    hess = np.broadcast_to(-(th + 1.0) * S, H.shape[:-1] + S.shape).copy()
    if len(model.jumps):
        psi = model.jumps.marks
        lam = model.jumps.intensities
        comp = model.jumps.compensated.astype(float)
        lu = np.log1p(H @ psi.T)
        w1 = lam * (np.exp(-(th + 1.0) * lu) - comp)
        w2 = lam * np.exp(-(th + 2.0) * lu)
        grad = grad + w1 @ psi
        hess -= (th + 1.0) * np.einsum("...j,ja,jb->...ab", w2, psi, psi)
    return grad, hess


def inner_objective(model: MarketModel, criterion: Criterion, x, p, h, t: float = 0.0) -> float:
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if feasible_margin(model, h) <= 0:
        raise InfeasibleControl(f"h={h.tolist()} is outside the admissible set")
    c = linear_coefficient(model, criterion, np.atleast_1d(x), np.atleast_1d(p), t)
    return float(_objective(model, criterion, c, h))


def inner_grad_hess(model: MarketModel, criterion: Criterion, x, p, h, t: float = 0.0):
    """Analytic gradient (m,) and Hessian (m, m) of the inner objective in h."""
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if feasible_margin(model, h) <= 0:
        raise InfeasibleControl(f"h={h.tolist()} is outside the admissible set")
    c = linear_coefficient(model, criterion, np.atleast_1d(x), np.atleast_1d(p), t)
    return _grad_hess(model, criterion, c, h)


def _damped_newton(model, criterion, c, H0, cfg: NewtonConfig, basis=None):
    """Maximise L(h) over h in H0 + span(basis) for each row of c."""
    c = np.atleast_2d(np.asarray(c, dtype=float))
    H = np.array(np.broadcast_to(H0, c.shape), dtype=float)
    nb = c.shape[0]
    N = np.eye(model.m) if basis is None else basis
    tol = cfg.tol * np.maximum(1.0, np.linalg.norm(c, axis=1))
    iters = np.zeros(nb, dtype=int)
    gnorm = np.full(nb, np.inf)
    psi = model.jumps.marks if len(model.jumps) else None
    active = np.arange(nb)
    eps = np.finfo(float).eps

    for it in range(cfg.max_iter + 1):
        if active.size == 0:
            break
        Ha, ca = H[active], c[active]
        grad, hess = _grad_hess(model, criterion, ca, Ha)
        gr = grad @ N
        gnorm[active] = np.linalg.norm(gr, axis=1)
        done = gnorm[active] <= tol[active]
        if it == cfg.max_iter:
            break
        active, Ha, ca, grad, hess, gr = (
            active[~done], Ha[~done], ca[~done], grad[~done], hess[~done], gr[~done])
        if active.size == 0:
            break
        hr = np.einsum("ai,bij,jc->bac", N.T, hess, N)
        dz = np.linalg.solve(-hr, gr[..., None])[..., 0]
        d = dz @ N.T
        alpha = np.ones(active.size)
        if psi is not None:
            marg = 1.0 + Ha @ psi.T
            dp = d @ psi.T
            with np.errstate(divide="ignore", invalid="ignore"):
                lim = np.where(dp < 0, cfg.fraction_to_boundary * marg / -dp, np.inf)
            alpha = np.minimum(alpha, lim.min(axis=1))
        f0 = _objective(model, criterion, ca, Ha)
        slope = np.einsum("bi,bi->b", grad, d)
        scale = np.abs(f0) + np.abs(np.einsum("bi,bi->b", Ha, ca)) + 1e-300
        accepted = np.zeros(active.size, dtype=bool)
        Hn = Ha.copy()
        for _ in range(60):
            todo = ~accepted
            if not todo.any():
                break
            trial = Ha[todo] + alpha[todo, None] * d[todo]
            with np.errstate(invalid="ignore", divide="ignore"):
                f1 = _objective(model, criterion, ca[todo], trial)
            ok = f1 >= f0[todo] + cfg.armijo * alpha[todo] * slope[todo] - 64 * eps * scale[todo]
            ok &= np.isfinite(f1)
            idx = np.flatnonzero(todo)
            Hn[idx[ok]] = trial[ok]
            accepted[idx[ok]] = True
            alpha[idx[~ok]] *= 0.5
        H[active] = Hn
        iters[active] += 1
        # rows whose line search stalled cannot improve further
        active = active[accepted]

    obj = _objective(model, criterion, c, H)
    marg = margins(model, H).min(axis=1) if psi is not None else np.full(nb, np.inf)
    return H, obj, gnorm, marg, iters, tol


def maximize_inner_batch(model: MarketModel, criterion: Criterion, c: np.ndarray,
                         config: NewtonConfig = NewtonConfig()) -> BatchSolution:
    """Maximise the inner objective for each row of the linear coefficients ``c`` (B, m)."""
    H, obj, gnorm, marg, iters, tol = _damped_newton(
        model, criterion, c, np.zeros(model.m), config)
    bad = np.flatnonzero(gnorm > tol)
    if bad.size:
        raise NoConvergence(
            f"{bad.size} inner problems did not converge; worst grad norm {gnorm[bad].max():.3e} "
            f"at coefficient {np.atleast_2d(c)[bad[0]].tolist()}")
    return BatchSolution(H, obj, gnorm, marg, iters)


def maximize_inner(model: MarketModel, criterion: Criterion, x, p,
                   config: NewtonConfig = NewtonConfig(), t: float = 0.0) -> InnerSolution:
    """Unique maximiser of the inner objective at (t, x, p), by damped Newton from h = 0."""
    c = linear_coefficient(model, criterion, np.atleast_1d(x), np.atleast_1d(p), t)
    sol = maximize_inner_batch(model, criterion, c[None, :], config)
    return InnerSolution(sol.h_star[0], float(sol.objective[0]), float(sol.grad_norm[0]),
                         float(sol.margin[0]), int(sol.iterations[0]))


def zero_beta(model: MarketModel, criterion: Criterion, select: str = "min_norm",
              config: NewtonConfig = NewtonConfig()) -> ZeroBetaPolicy:
    """A constant policy with A_hat' h = -A0, making g independent of the factor.

    ``select="min_norm"`` returns h = 0 when A0 = 0 and otherwise the
    minimum-norm solution.  ``select="min_cost"`` returns the zero-beta policy
    with the smallest constant cost over the whole affine solution set.
    """
    if select not in ("min_norm", "min_cost"):
        raise ValueError(f"unknown zero-beta selection {select!r}")
    At = model.A_hat.T
    A0_zero = not np.any(model.A0)
    if not A0_zero:
        s = np.linalg.svd(model.A_hat, compute_uv=False)
        rank = 0 if s.size == 0 or s[0] == 0 else int(np.sum(s > 1e-10 * s[0]))
        if rank < model.n:
            raise RankDeficient(f"A_hat has rank {rank} < n = {model.n} while A0 != 0")
        h = np.linalg.pinv(At) @ (-model.A0)
    else:
        h = np.zeros(model.m)

    if select == "min_cost":
        basis = scipy.linalg.null_space(At) if np.any(At) else np.eye(model.m)
        if basis.shape[1]:
            if feasible_margin(model, h) <= 0:
                raise ZeroBetaInfeasible("minimum-norm zero-beta policy is not admissible")
            c = model.a_hat[None, :]  # x = 0, p = 0
            H, _, gnorm, _, _, tol = _damped_newton(model, criterion, c, h, config, basis)
            if gnorm[0] > tol[0]:
                raise NoConvergence("cost minimisation over zero-beta policies did not converge")
            h = H[0]

    if feasible_margin(model, h) <= 0:
        raise ZeroBetaInfeasible(
            f"zero-beta solution h={h.tolist()} has margin {feasible_margin(model, h):.3g} <= 0")
    g_check = g_value(model, criterion, np.zeros(model.n), h)
    x_probe = np.random.default_rng(12345).standard_normal(model.n)
    g_probe = float(g_values(model, criterion, x_probe, h))
    if abs(g_probe - g_check) > 1e-12 * (1.0 + abs(g_check)) * (1.0 + np.abs(x_probe).sum()):
        raise RuntimeError(f"zero-beta cost depends on x: {g_check} vs {g_probe}")
    return ZeroBetaPolicy(h, g_check)
