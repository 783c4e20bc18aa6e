"""Width of the lateral layer where the computed phi fails to be convex.

On the box, phi equals the zero-beta datum on both faces and exceeds it
inside, so a convex phi is impossible there; convexity can only hold away from
the faces.  For each resolution, report the full-box minimum second difference
and the smallest edge (in nodes) beyond which the check passes."""
from pathlib import Path

from riskjump.formats import load_model_file
from riskjump.hjb import Grid, convexity_report, policy_iteration
from riskjump.model import validate_model

ROOT = Path(__file__).resolve().parents[1]


def smallest_passing_edge(vf):
    n = vf.grid.nodes_per_axis
    for edge in range(n // 2 - 2):
        if convexity_report(vf, edge=edge).passed:
            return edge
    return None


if __name__ == "__main__":
    for name in ("f1.json", "f1b.json"):
        model, crit, T = load_model_file(ROOT / "configs" / name)
        model = validate_model(model)
        print(name)
        for n in (64, 128, 256):
            vf = policy_iteration(model, crit, Grid(1, [0.2], [2.0], n, 0.0, T, n))
            rep = convexity_report(vf)
            edge = smallest_passing_edge(vf)
            width = None if edge is None else edge * vf.grid.spacing[0]
            print(f"  N={n:4d}: full-box min second difference {rep.min_second_difference:+.3e} "
                  f"at {rep.worst_location}; passes beyond {edge} nodes (width {width:.3f})")
