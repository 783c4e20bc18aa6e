"""Partial observation end to end: simulate prices, split off the jumps, run
the filter, compare the error covariance with the Riccati solution, then solve
the control problem for the reduced model."""
from pathlib import Path

import numpy as np

from riskjump.formats import load_model_file
from riskjump.hjb import Grid, convexity_report, policy_iteration
from riskjump.kalman import (FilterParams, decompose_observations, innovations, reduced_model,
                             riccati_solve, run_filter, sample_prior)
from riskjump.model import validate_model
from riskjump.montecarlo import PathConfig, simulate_physical

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    model, crit, T = load_model_file(ROOT / "configs" / "f1.json")
    model = validate_model(model)
    params = FilterParams([0.0], [[0.05]])
    cfg = PathConfig(num_paths=10_000, dt=0.005, seed=41, horizon=T)
    x0 = sample_prior(params, cfg.num_paths, cfg.seed)
    paths = simulate_physical(model, crit, 0.0, x0, cfg=cfg, record_paths=True)
    dec = decompose_observations(model, paths.times, paths.log_price, paths.step_counts)
    state = run_filter(model, params, dec.y1, paths.times)
    err = paths.X - state.x_hat
    print(f"c = {dec.c}")
    for t in (0.25, 0.5, 0.75, 1.0):
        k = int(round(t / cfg.step))
        print(f"t={t:.2f}: empirical error variance {np.mean(err[k, :, 0] ** 2):.5f}, "
              f"Riccati {state.P[k, 0, 0]:.5f}")
    z = innovations(model, state, dec.y1) / np.sqrt(cfg.step)
    print(f"innovations: mean {z.mean():+.4f}, variance {z.var():.4f}, "
          f"lag-1 correlation {np.mean(z[1:] * z[:-1]):+.4f}")

    grid = Grid(1, [0.2], [2.0], 128, 0.0, T, 128)
    P = riccati_solve(model, params.P0, grid.times)
    reduced = validate_model(reduced_model(model, grid.times, P))
    vf = policy_iteration(reduced, crit, grid)
    d = vf.diagnostics
    print(f"reduced model: {d['iterations']} iterations, increase {max(d['monotonicity_violations']):.1e}, "
          f"bound excess {max(d['max_bound_excess']):.1e}, "
          f"inner-half convexity {convexity_report(vf, edge=32).passed}")
