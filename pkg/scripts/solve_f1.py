"""Solve the one-factor reference model and print iteration diagnostics.

    python3 scripts/solve_f1.py --nodes 128 --steps 128 --out runs/f1
"""
import argparse
from pathlib import Path

import numpy as np

from riskjump.formats import load_model_file, write_value_csv
from riskjump.hjb import Grid, SolverConfig, policy_iteration
from riskjump.model import validate_model

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--model", default=str(ROOT / "configs" / "f1.json"))
    ap.add_argument("--nodes", type=int, default=128)
    ap.add_argument("--steps", type=int, default=128)
    ap.add_argument("--center", type=float, default=0.2)
    ap.add_argument("--half-width", type=float, default=2.0)
    ap.add_argument("--time-scheme", type=float, default=1.0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    model, crit, T = load_model_file(args.model)
    model = validate_model(model)
    grid = Grid(1, [args.center], [args.half_width], args.nodes, 0.0, T, args.steps)
    vf = policy_iteration(model, crit, grid, SolverConfig(time_scheme=args.time_scheme))
    d = vf.diagnostics
    print(f"zero-beta h = {vf.zero_beta.h_check}, cost = {vf.zero_beta.g_check:.6g}")
    for k, (delta, viol, excess) in enumerate(zip(d["deltas"], d["monotonicity_violations"],
                                                  d["max_bound_excess"])):
        print(f"iter {k + 1}: delta {delta:.3e}  increase {viol:.1e}  bound excess {excess:.1e}")
    print(f"residual: full box {d['hamiltonian_residual']:.3e}, inner half {d['hamiltonian_residual_inner']:.3e}")
    x = grid.axes[0]
    for x0 in (-0.5, 0.0, 0.2, 0.5, 1.0):
        print(f"x = {x0:+.2f}: phi(0, x) = {np.interp(x0, x, vf.phi[0]):+.6f}  "
              f"h(0, x) = {np.interp(x0, x, vf.policy[0, :, 0]):+.5f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rows = write_value_csv(out / "value.csv", vf)
        print(f"wrote {rows} rows to {out / 'value.csv'}")


if __name__ == "__main__":
    main()
