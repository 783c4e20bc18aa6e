"""JSON model files and grid/solution exports (format version 1, see docs/FORMAT.md)."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .criterion import Criterion
from .hjb import Grid, ValueField
from .model import JumpAtom, JumpMeasure, MarketModel
from .optimizer import ZeroBetaPolicy

FORMAT_VERSION = 1
LAMBDA_TABLE_KEY = "Lambda_eff(t)"


class FormatError(ValueError):
    """Malformed input file; the message names the offending field."""


def _field(d: dict, key: str, where: str):
    if key not in d:
        raise FormatError(f"missing field '{where}{key}'")
    return d[key]


def model_from_dict(d: dict) -> MarketModel:
    try:
        atoms = tuple(JumpAtom(_field(a, "mark", f"atoms[{i}]."),
                               _field(a, "intensity", f"atoms[{i}]."),
                               a.get("compensated", True))
                      for i, a in enumerate(d.get("atoms", [])))
        table = None
        if LAMBDA_TABLE_KEY in d:
            blk = d[LAMBDA_TABLE_KEY]
            table = (np.asarray(_field(blk, "times", LAMBDA_TABLE_KEY + "."), dtype=float),
                     np.asarray(_field(blk, "values", LAMBDA_TABLE_KEY + "."), dtype=float))
        kw = {k: _field(d, k, "") for k in ("b", "B", "Lambda", "a0", "A0", "a", "A", "Sigma")}
        model = MarketModel(**kw, jumps=JumpMeasure(atoms, bool(d.get("pure_diffusion", False))),
                            lambda_table=table)
    except FormatError:
        raise
    except (TypeError, ValueError) as exc:
        raise FormatError(f"model coefficients could not be read: {exc}") from exc
    for key, got in (("n", model.n), ("m", model.m)):
        if key in d and int(d[key]) != got:
            raise FormatError(f"field '{key}' is {d[key]} but the coefficients imply {got}")
    return model


def model_to_dict(model: MarketModel, criterion: Criterion | None = None, T: float | None = None) -> dict:
    d = {
        "format_version": FORMAT_VERSION, "n": model.n, "m": model.m,
        "b": model.b.tolist(), "B": model.B.tolist(), "Lambda": model.Lambda.tolist(),
        "a0": model.a0, "A0": model.A0.tolist(), "a": model.a.tolist(), "A": model.A.tolist(),
        "Sigma": model.Sigma.tolist(),
        "atoms": [{"mark": a.mark.tolist(), "intensity": a.intensity, "compensated": a.compensated}
                  for a in model.jumps.atoms],
        "pure_diffusion": model.jumps.pure_diffusion,
    }
    if model.lambda_table is not None:
        d[LAMBDA_TABLE_KEY] = {"times": model.lambda_table[0].tolist(),
                               "values": model.lambda_table[1].tolist()}
    if criterion is not None:
        d["theta"], d["v"] = criterion.theta, criterion.v
    if T is not None:
        d["T"] = T
    return d


def load_model_file(path) -> tuple[MarketModel, Criterion, float]:
    """Returns (model, criterion, horizon T); theta, v and T default to 1."""
    try:
        d = json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read model file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"model file {path} is not valid JSON: {exc}") from exc
    ver = d.get("format_version", FORMAT_VERSION)
    if ver != FORMAT_VERSION:
        raise FormatError(f"field 'format_version' is {ver}, only {FORMAT_VERSION} is supported")
    try:
        crit = Criterion(float(d.get("theta", 1.0)), float(d.get("v", 1.0)))
    except ValueError as exc:
        raise FormatError(f"fields 'theta'/'v': {exc}") from exc
    T = float(d.get("T", 1.0))
    if not T > 0:
        raise FormatError(f"field 'T' must be positive, got {T}")
    return model_from_dict(d), crit, T


def save_model_file(path, model: MarketModel, criterion: Criterion | None = None,
                    T: float | None = None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, criterion, T), indent=2) + "\n")


def grid_to_dict(grid: Grid) -> dict:
    return {"dim": grid.dim, "center": grid.center.tolist(), "half_width": grid.half_width.tolist(),
            "nodes_per_axis": grid.nodes_per_axis, "t0": grid.t0, "T": grid.T,
            "time_steps": grid.time_steps}


def grid_from_dict(d: dict) -> Grid:
    return Grid(int(d["dim"]), d["center"], d["half_width"], int(d["nodes_per_axis"]),
                float(d["t0"]), float(d["T"]), int(d["time_steps"]))


def write_value_csv(path, vf: ValueField) -> int:
    """One row per (time, node), time-major, nodes in C order; returns the row count."""
    grid = vf.grid
    n, m = grid.dim, vf.policy.shape[-1]
    pts = grid.points.reshape(-1, n)
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i + 1}" for i in range(n)] + ["phi_tilde", "phi"]
                   + [f"h{j + 1}" for j in range(m)])
        for k, t in enumerate(grid.times):
            u = vf.phi_tilde[k].reshape(-1)
            p = vf.phi[k].reshape(-1)
            h = vf.policy[k].reshape(-1, m)
            for i in range(pts.shape[0]):
                w.writerow([repr(float(t))] + [repr(float(x)) for x in pts[i]]
                           + [repr(float(u[i])), repr(float(p[i]))] + [repr(float(v)) for v in h[i]])
                rows += 1
    return rows


def read_value_csv(path, grid: Grid, zb: ZeroBetaPolicy, criterion: Criterion) -> ValueField:
    """Inverse of :func:`write_value_csv` for a known grid."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader])
    n = grid.dim
    m = len(header) - n - 3
    want = (grid.time_steps + 1) * grid.nodes_per_axis ** n
    if data.shape[0] != want:
        raise FormatError(f"value file has {data.shape[0]} rows, expected {want}")
    shape = (grid.time_steps + 1,) + grid.shape
    return ValueField(grid, data[:, n + 1].reshape(shape), data[:, n + 2].reshape(shape),
                      data[:, n + 3:].reshape(shape + (m,)), zb, criterion.theta, criterion.v, {})
