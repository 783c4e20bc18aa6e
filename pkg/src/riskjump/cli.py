"""Command-line entry point: ``riskjump <command> --model f.json --out dir``.

Exit status: 0 success, 1 invalid input or model, 2 solver non-convergence,
3 verification failure.  Every JSON written embeds the effective
configuration, the model and the seed; ``--from-summary`` reruns from it.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import formats
from .criterion import Criterion, effective_drift, g_values
from .hjb import (Grid, NoPolicyConvergence, NonPositiveValue, SolverConfig, convexity_report,
                  policy_iteration, solve_linear_pde)
from .kalman import (FilterParams, compute_c, decompose_observations, innovations, riccati_solve,
                     run_filter, sample_prior, write_filter_csv)
from .model import (DimensionMismatch, JumpSignCoverageViolated, MarkBelowMinusOne, ModelError,
                    SigmaNotPositiveDefinite, check_model, validate_model)
from .montecarlo import (GridPolicy, PathConfig, estimate_value_direct, feynman_kac_oracle,
                         martingale_check, martingale_passes, simulate_changed_measure,
                         simulate_physical)
from .optimizer import NoConvergence, RankDeficient, ZeroBetaInfeasible, zero_beta

EXIT_OK, EXIT_INVALID, EXIT_NOCONV, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_INVALID)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="riskjump", description="Risk-sensitive jump-diffusion portfolio solver")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--model", help="model JSON file")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--format-version", type=int, default=formats.FORMAT_VERSION)
        sp.add_argument("--theta", type=float, help="override the risk sensitivity")
        sp.add_argument("--v", type=float, help="override the initial wealth")
        sp.add_argument("--from-summary", help="rerun with the configuration embedded in a summary JSON")

    def grid_opts(sp):
        sp.add_argument("--nodes", type=int, default=64)
        sp.add_argument("--steps", type=int, default=64)
        sp.add_argument("--center", type=_floats, default=None)
        sp.add_argument("--half-width", type=_floats, default=[1.0])
        sp.add_argument("--t0", type=float, default=0.0)
        sp.add_argument("--T", type=float, default=None, help="horizon (default: the model file's T)")
        sp.add_argument("--time-scheme", type=float, default=1.0)
        sp.add_argument("--drift-scheme", default="monotone",
                        choices=["monotone", "hybrid", "upwind", "central"])
        sp.add_argument("--policy-tol", type=float, default=1e-8)
        sp.add_argument("--max-iters", type=int, default=50)

    def path_opts(sp):
        sp.add_argument("--paths", type=int, default=10_000)
        sp.add_argument("--dt", type=float, default=0.01)
        sp.add_argument("--scheme", default="euler", choices=["euler", "exact_ou"])
        sp.add_argument("--x0", type=_floats, default=None)

    sp = sub.add_parser("validate", help="check the model assumptions")
    common(sp)
    sp = sub.add_parser("zero-beta", help="print the zero-beta policy and its cost")
    common(sp)
    sp.add_argument("--select", default="min_cost", choices=["min_norm", "min_cost"])
    sp = sub.add_parser("solve", help="policy iteration on a grid")
    common(sp)
    grid_opts(sp)
    sp = sub.add_parser("simulate", help="path estimators for a policy")
    common(sp)
    path_opts(sp)
    sp.add_argument("--horizon", type=float, default=None, help="default: the model file's T")
    sp.add_argument("--policy", default="0", help="'zero-beta' or comma-separated constant h")
    sp.add_argument("--solution", help="directory written by 'solve'; use its policy")
    sp = sub.add_parser("verify", help="cross-check a solution against Monte Carlo")
    common(sp)
    grid_opts(sp)
    path_opts(sp)
    sp.add_argument("--solution", help="directory written by 'solve' (solved afresh if absent)")
    sp.add_argument("--probes", type=int, default=5)
    sp = sub.add_parser("filter-demo", help="simulate, decompose, filter and check consistency")
    common(sp)
    path_opts(sp)
    sp.add_argument("--horizon", type=float, default=None, help="default: the model file's T")
    sp.add_argument("--policy", default="0")
    sp.add_argument("--m0", type=_floats, default=None)
    sp.add_argument("--P0", type=_floats, default=[0.05], help="prior covariance, row-major")
    return p


# -- helpers -------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


def _grid(args, model) -> Grid:
    center = args.center if args.center is not None else [0.0] * model.n
    return Grid(model.n, center, args.half_width, args.nodes, args.t0, args.T, args.steps)


def _solver(args) -> SolverConfig:
    return SolverConfig(policy_tol=args.policy_tol, max_policy_iters=args.max_iters,
                        time_scheme=args.time_scheme, drift_scheme=args.drift_scheme)


def _x0(args, model):
    x0 = args.x0 if args.x0 is not None else [0.0] * model.n
    if len(x0) != model.n:
        raise UsageError(f"field 'x0' has {len(x0)} components, the model has n = {model.n}")
    return np.asarray(x0)


def _constant_policy(text, model, crit):
    if text == "zero-beta":
        return zero_beta(model, crit, "min_norm").h_check
    h = np.asarray(_floats(text))
    if h.size == 1:
        h = np.full(model.m, h[0])
    if h.size != model.m:
        raise UsageError(f"field 'policy' has {h.size} components, the model has m = {model.m}")
    return h


def _load_solution(directory, model, crit):
    d = Path(directory)
    summary = json.loads((d / "summary.json").read_text())
    grid = formats.grid_from_dict(summary["grid"])
    zb = zero_beta(model, crit, summary["config"]["zero_beta_select"])
    return formats.read_value_csv(d / "value.csv", grid, zb, crit), summary


# -- commands ------------------------------------------------------------------

_CHECKS = [
    ("dimensions", DimensionMismatch),
    ("nondegenerate asset diffusion", SigmaNotPositiveDefinite),
    ("jump marks above -1", MarkBelowMinusOne),
    ("jump sign coverage", JumpSignCoverageViolated),
]


def cmd_validate(args, model, crit):
    errors = check_model(model)
    report = {}
    for name, cls in _CHECKS:
        hits = [str(e) for e in errors if isinstance(e, cls)]
        report[name] = {"pass": not hits, "messages": hits}
    other = [str(e) for e in errors if not any(isinstance(e, c) for _, c in _CHECKS)]
    report["jump intensities"] = {"pass": not other, "messages": other}
    for name, r in report.items():
        print(f"{name:32s} {'pass' if r['pass'] else 'FAIL'}")
        for msg in r["messages"]:
            print(f"    {msg}")
    out = {"checks": report, "valid": not errors}
    if not errors:
        vm = validate_model(model)
        out["rank_A_hat_is_n"] = vm.rank_A_hat_is_n
        print(f"{'rank(A_hat) = n':32s} {vm.rank_A_hat_is_n}")
    return (EXIT_OK if not errors else EXIT_INVALID), out


def cmd_zero_beta(args, model, crit):
    zb = zero_beta(validate_model(model), crit, args.select)
    print(f"h_check = {zb.h_check.tolist()}")
    print(f"g_check = {zb.g_check!r}")
    return EXIT_OK, {"h_check": zb.h_check, "g_check": zb.g_check}


def cmd_solve(args, model, crit):
    model = validate_model(model)
    grid, cfg = _grid(args, model), _solver(args)
    out_dir = Path(args.out)
    summary = {"grid": formats.grid_to_dict(grid),
               "config": {"policy_tol": cfg.policy_tol, "max_policy_iters": cfg.max_policy_iters,
                          "time_scheme": cfg.time_scheme, "drift_scheme": cfg.drift_scheme,
                          "zero_beta_select": cfg.zero_beta_select}}
    try:
        vf = policy_iteration(model, crit, grid, cfg)
    except NoPolicyConvergence as exc:
        print(str(exc), file=sys.stderr)
        summary["diagnostics"] = exc.field.diagnostics if exc.field is not None else {}
        summary["converged"] = False
        _write_json(out_dir / "summary.json", _with_run(summary, args, model, crit))
        return EXIT_NOCONV, None
    rows = formats.write_value_csv(out_dir / "value.csv", vf)
    summary.update(converged=True, rows=rows, diagnostics=vf.diagnostics,
                   zero_beta={"h_check": vf.zero_beta.h_check, "g_check": vf.zero_beta.g_check})
    _write_json(out_dir / "summary.json", _with_run(summary, args, model, crit))
    print(f"converged in {vf.diagnostics['iterations']} iterations; wrote {rows} rows")
    return EXIT_OK, None


def cmd_simulate(args, model, crit):
    model = validate_model(model)
    cfg = PathConfig(num_paths=args.paths, dt=args.dt, seed=args.seed, scheme=args.scheme,
                     horizon=args.horizon)
    x0 = _x0(args, model)
    if args.solution:
        vf, _ = _load_solution(args.solution, model, crit)
        policy, label = GridPolicy(vf), f"solution:{args.solution}"
    else:
        policy, label = _constant_policy(args.policy, model, crit), args.policy
    direct = estimate_value_direct(model, crit, policy, x0, cfg)
    changed = simulate_changed_measure(model, crit, policy, x0, cfg)
    mart = martingale_check(model, crit, policy, cfg, x0)
    records = [direct.criterion.record(cfg), direct.raw.record(cfg), changed.record(cfg),
               mart.record(cfg, passes=martingale_passes(mart))]
    for r in records:
        print(f"{r['estimator']:20s} {r['mean']!r} +- {r['std_error']!r}")
    return EXIT_OK, {"policy": label, "x0": x0, "estimates": records}


def cmd_verify(args, model, crit):
    model = validate_model(model)
    if args.solution:
        vf, _ = _load_solution(args.solution, model, crit)
    else:
        try:
            vf = policy_iteration(model, crit, _grid(args, model), _solver(args))
        except NoPolicyConvergence as exc:
            print(str(exc), file=sys.stderr)
            return EXIT_NOCONV, {"converged": False}
    grid = vf.grid
    checks = {}

    # stored identities and bounds
    u = vf.phi_tilde
    ident = np.max(np.abs(vf.phi + np.log(np.where(u > 0, u, np.nan)) / crit.theta))
    bound = vf.upper_bound()
    checks["positivity"] = {"pass": bool(np.all(u > 0)), "min": float(np.min(u))}
    checks["log_identity"] = {"pass": bool(np.isfinite(ident) and ident <= 1e-12 * (1 + np.max(np.abs(vf.phi)))),
                              "max_abs_error": float(ident) if np.isfinite(ident) else None}
    checks["upper_bound"] = {"pass": bool(np.max(u - bound) <= 1e-9), "max_excess": float(np.max(u - bound))}

    # convexity away from the lateral boundary layer
    edge = grid.nodes_per_axis // 4
    rep = convexity_report(vf, edge=edge, seed=args.seed)
    checks["convexity_inner_half"] = {"pass": rep.passed, "min_second_difference": rep.min_second_difference,
                                      "worst_location": rep.worst_location, "midpoint_min_gap": rep.midpoint_min_gap}

    # transformed value of the solved policy against a stopped Feynman-Kac estimate
    cfg = PathConfig(num_paths=args.paths, dt=args.dt, seed=args.seed, scheme=args.scheme,
                     horizon=grid.T - grid.t0, t0=grid.t0)
    pol = GridPolicy(vf)
    probes = _probe_points(grid, args.probes, args.seed)
    fine = solve_linear_pde(model, crit, vf.policy, grid, SolverConfig(), vf.zero_beta)
    coarse_grid = Grid(grid.dim, grid.center, grid.half_width, (grid.nodes_per_axis - 1) // 2 + 1,
                       grid.t0, grid.T, grid.time_steps // 2)
    coarse_policy = _policy_on(pol, coarse_grid)
    coarse = solve_linear_pde(model, crit, coarse_policy, coarse_grid, SolverConfig(), vf.zero_beta)
    lo, hi = grid.center - grid.half_width, grid.center + grid.half_width
    th = crit.theta
    rows = []
    for x in probes:
        pde = _interp(grid, fine[0], x)
        budget = 2.0 * abs(pde - _interp(coarse_grid, coarse[0], x))
        st = feynman_kac_oracle(
            lambda s, X: effective_drift(model, crit, s, X, pol(s, X)),
            lambda s: model.Lambda_at(s),
            lambda s, X: g_values(model, crit, X, pol(s, X)),
            None,
            lambda s, X: crit.terminal_value * np.exp(th * vf.zero_beta.g_check * (grid.T - s)) * np.ones(len(X)),
            (lo, hi), grid.t0, x, grid.T, cfg, th)
        ok = abs(pde - st.mean) <= 3 * st.std_error + budget
        rows.append({"x": x, "pde": pde, "mc": st.mean, "se": st.std_error, "grid_budget": budget, "pass": ok})
    checks["pde_vs_feynman_kac"] = {"pass": all(r["pass"] for r in rows), "probes": rows}

    x0 = grid.center
    mart = martingale_check(model, crit, pol, cfg, x0)
    checks["martingale"] = {"pass": martingale_passes(mart), **mart.record(cfg)}

    eq = []
    for h in (np.zeros(model.m), vf.zero_beta.h_check):
        d = estimate_value_direct(model, crit, h, x0, cfg).raw
        c = simulate_changed_measure(model, crit, h, x0, cfg)
        tol = 3 * float(np.hypot(d.std_error, c.std_error))
        eq.append({"h": h, "direct": d.mean, "changed": c.mean, "pass": abs(d.mean - c.mean) <= tol + 1e-14})
    checks["measure_change"] = {"pass": all(r["pass"] for r in eq), "policies": eq}

    passed = all(c["pass"] for c in checks.values())
    for name, c in checks.items():
        print(f"{name:24s} {'pass' if c['pass'] else 'FAIL'}")
    return (EXIT_OK if passed else EXIT_VERIFY), {"passed": passed, "checks": checks}


def _policy_on(pol, grid):
    out = np.empty((grid.time_steps + 1,) + grid.shape + (pol(0.0, np.zeros((1, grid.dim))).shape[-1],))
    pts = grid.points.reshape(-1, grid.dim)
    for k, t in enumerate(grid.times):
        out[k] = pol(t, pts).reshape(grid.shape + (-1,))
    return out


def _interp(grid, values, x):
    return float(RegularGridInterpolator(grid.axes, values)(np.atleast_2d(x))[0])


def _probe_points(grid, count, seed):
    """Evenly spread probes inside the inner half of the box."""
    if grid.dim == 1:
        xs = np.linspace(-0.4, 0.4, count)[:, None]
    else:
        xs = np.random.default_rng(seed).uniform(-0.4, 0.4, size=(count, grid.dim))
    return grid.center + xs * 2 * grid.half_width * 0.5


def cmd_filter_demo(args, model, crit):
    model = validate_model(model)
    compute_c(model)
    n = model.n
    m0 = np.asarray(args.m0 if args.m0 is not None else [0.0] * n)
    P0 = np.asarray(args.P0).reshape(n, n) if len(args.P0) == n * n else None
    if P0 is None or m0.size != n:
        raise UsageError(f"fields 'm0'/'P0' must have {n} and {n * n} entries")
    params = FilterParams(m0, P0)
    cfg = PathConfig(num_paths=args.paths, dt=args.dt, seed=args.seed, scheme=args.scheme,
                     horizon=args.horizon)
    x0 = sample_prior(params, cfg.num_paths, args.seed)
    h = _constant_policy(args.policy, model, crit)
    paths = simulate_physical(model, crit, h, x0, cfg=cfg, record_paths=True)
    dec = decompose_observations(model, paths.times, paths.log_price, paths.step_counts)
    P = riccati_solve(model, P0, paths.times)
    st = run_filter(model, params, dec.y1, paths.times, P)
    report = {}
    for t in (0.25 * args.horizon, 0.5 * args.horizon, args.horizon):
        k = int(round(t / cfg.step))
        e = paths.X[k] - st.x_hat[k]
        C = np.atleast_2d(np.cov(e.reshape(-1, n).T))
        rel = float(np.linalg.norm(C - P[k]) / np.linalg.norm(P[k])) if np.any(P[k]) else float(np.linalg.norm(C))
        report[f"t={t:g}"] = {"empirical": C, "riccati": P[k], "relative_error": rel, "pass": rel <= 0.10}
    dU = innovations(model, st, dec.y1) / np.sqrt(cfg.step)
    z = dU.reshape(dU.shape[0], -1)
    N = z.size
    stats = {"mean": float(z.mean()), "variance": float(z.var()),
             "lag1_correlation": float(np.mean(z[1:] * z[:-1]))}
    stats["pass"] = (abs(stats["mean"]) <= 3 / np.sqrt(N) and abs(stats["variance"] - 1) <= 3 * np.sqrt(2 / N)
                     and abs(stats["lag1_correlation"]) <= 3 / np.sqrt(z[1:].size))
    write_filter_csv(Path(args.out) / "filter.csv", st)
    passed = all(r["pass"] for r in report.values()) and stats["pass"]
    for name, r in report.items():
        print(f"covariance {name:10s} rel.err {r['relative_error']:.4f} {'pass' if r['pass'] else 'FAIL'}")
    print(f"innovations             {'pass' if stats['pass'] else 'FAIL'}")
    return (EXIT_OK if passed else EXIT_VERIFY), {"c": dec.c, "covariance": report, "innovations": stats}


COMMANDS = {"validate": cmd_validate, "zero-beta": cmd_zero_beta, "solve": cmd_solve,
            "simulate": cmd_simulate, "verify": cmd_verify, "filter-demo": cmd_filter_demo}


def _with_run(data, args, model, crit):
    cfg = {k: v for k, v in vars(args).items() if k not in ("from_summary", "out")}
    T = getattr(args, "T", None) or getattr(args, "horizon", None)
    return {"format_version": formats.FORMAT_VERSION, "command": args.command, "seed": args.seed,
            "run_config": cfg, "model": formats.model_to_dict(model, crit, T), **data}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.format_version != formats.FORMAT_VERSION:
            raise UsageError(f"field 'format_version' must be {formats.FORMAT_VERSION}")
        if args.from_summary:
            summary = json.loads(Path(args.from_summary).read_text())
            out = args.out
            args = argparse.Namespace(**summary["run_config"])
            args.out, args.from_summary = out, None
            model = formats.model_from_dict(summary["model"])
            crit = Criterion(summary["model"]["theta"], summary["model"]["v"])
        else:
            if not args.model:
                raise UsageError("field 'model' is required (--model PATH)")
            model, crit, T = formats.load_model_file(args.model)
            if args.theta is not None or args.v is not None:
                crit = Criterion(args.theta if args.theta is not None else crit.theta,
                                 args.v if args.v is not None else crit.v)
            for key in ("T", "horizon"):
                if getattr(args, key, 0.0) is None:
                    setattr(args, key, T)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        status, data = COMMANDS[args.command](args, model, crit)
    except (UsageError, formats.FormatError, ModelError, RankDeficient, ZeroBetaInfeasible,
            ValueError, OSError) as exc:
        print(f"riskjump: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NoConvergence, NonPositiveValue) as exc:
        print(f"riskjump: {exc}", file=sys.stderr)
        return EXIT_NOCONV
    if data is not None:
        name = args.command.replace("-", "_") + ".json"
        _write_json(Path(args.out) / name, _with_run(data, args, model, crit))
    return status


if __name__ == "__main__":
    sys.exit(main())
