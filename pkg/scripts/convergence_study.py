"""Mesh refinement on the reference model: probe values of phi(0, .) and the
Hamiltonian residual under simultaneous halving of dx and dt, plus the
jump-free model against its quadratic-ansatz oracle for both time schemes."""
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from oracles import jump_free_quadratic_value  # noqa: E402
from riskjump.formats import load_model_file  # noqa: E402
from riskjump.hjb import Grid, SolverConfig, policy_iteration  # noqa: E402
from riskjump.model import validate_model  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
PROBES = np.array([-0.6, -0.2, 0.2, 0.6, 1.0])


def refinement(model, crit):
    print("N=K    probes of phi(0, .)                              residual(full)  residual(inner)")
    prev = None
    for n in (32, 64, 128, 256):
        vf = policy_iteration(model, crit, Grid(1, [0.2], [2.0], n, 0.0, 1.0, n))
        vals = np.interp(PROBES, vf.grid.axes[0], vf.phi[0])
        d = vf.diagnostics
        step = "" if prev is None else f"  max change {np.max(np.abs(vals - prev)):.2e}"
        print(f"{n:4d}  {' '.join(f'{v:+.6f}' for v in vals)}  {d['hamiltonian_residual']:.3e}"
              f"  {d['hamiltonian_residual_inner']:.3e}{step}")
        prev = vals


def jump_free(model, crit):
    m = model
    oracle = jump_free_quadratic_value(m.b, m.B, m.Lambda, m.a0, m.A0, m.a_hat, m.A_hat, m.Sigma,
                                       crit.theta, crit.v, 1.0, [0.0])
    print("\njump-free model, max relative error of phi(0, .) on the inner half")
    for scheme in (1.0, 0.5):
        row = []
        for n in (32, 64, 128):
            g = Grid(1, [0.0], [1.0], n, 0.0, 1.0, n)
            vf = policy_iteration(model, crit, g, SolverConfig(time_scheme=scheme))
            x = g.axes[0]
            inner = np.abs(x) <= 0.5
            err = np.max(np.abs(vf.phi[0, inner] / oracle(0.0, x[inner][:, None]) - 1))
            row.append(f"N={n}: {err:.2e}")
        print(f"  time weight {scheme}: " + "  ".join(row))


if __name__ == "__main__":
    model, crit, _ = load_model_file(ROOT / "configs" / "f1.json")
    model = validate_model(model)
    refinement(model, crit)
    jump_free(validate_model(model.without_jumps()), crit)
