"""Dataset files: a CSV table plus a JSON sidecar describing the grouping structure.

CSV columns: ``y``, fixed covariates ``x1..x{p-1}`` (the intercept is implicit),
grouping columns ``g1..gK`` holding 1-based levels, and any covariates that feed
random slopes.  The sidecar lists, per factor, its column, ``n_levels``, ``q`` and
``slope_columns``; the random-effects row of factor ``j`` is ``[1, *slope_columns]``.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .design import FixedDesign, GroupedDesign, GroupingFactor, LmmProblem

FORMAT_VERSION = 1


def _fmt(v) -> str:
    return repr(float(v))


def write_dataset(problem: LmmProblem, csv_path, meta_path=None, extra_meta: dict | None = None):
    """Write ``problem`` as CSV + JSON; returns the two paths.

    Slope covariates are taken from ``z_rows[:, 1:]``; this requires each factor's
    first random-effects column to be the intercept.
    """
    csv_path = Path(csv_path)
    meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".meta.json")
    X, y = problem.X, problem.y
    if not np.all(X[:, 0] == 1.0):
        raise ValueError("first column of X must be the intercept")
    header = ["y"] + [f"x{k}" for k in range(1, X.shape[1])]
    columns = [y] + [X[:, k] for k in range(1, X.shape[1])]
    factors_meta = []
    group_cols, slope_cols = [], []
    for j, f in enumerate(problem.grouped.factors, start=1):
        if not np.all(f.z_rows[:, 0] == 1.0):
            raise ValueError(f"factor {j}: first random-effects column must be the intercept")
        names = [f"g{j}_s{k}" for k in range(1, f.q)]
        factors_meta.append({"name": f.name or f"g{j}", "column": f"g{j}", "n_levels": f.n_levels,
                             "q": f.q, "slope_columns": names})
        group_cols.append((f"g{j}", f.level_of_obs + 1))
        slope_cols.extend((nm, f.z_rows[:, k]) for k, nm in enumerate(names, start=1))
    header += [c for c, _ in group_cols] + [c for c, _ in slope_cols]

    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(problem.n):
            row = [_fmt(c[i]) for c in columns]
            row += [str(int(v[i])) for _, v in group_cols]
            row += [_fmt(v[i]) for _, v in slope_cols]
            w.writerow(row)

    meta = {
        "format_version": FORMAT_VERSION,
        "n": problem.n,
        "p": problem.p,
        "K": problem.grouped.K,
        "response": "y",
        "fixed": header[1:X.shape[1]],
        "factors": factors_meta,
    }
    if extra_meta:
        meta.update(extra_meta)
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return csv_path, meta_path


def read_meta(meta_path) -> dict:
    return json.loads(Path(meta_path).read_text())


def read_dataset(csv_path, meta_path=None):
    """Load a dataset written by :func:`write_dataset` (or by hand in the same layout).

    Returns ``(problem, meta)``.
    """
    csv_path = Path(csv_path)
    meta_path = Path(meta_path) if meta_path else csv_path.with_suffix(".meta.json")
    meta = read_meta(meta_path)
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{csv_path}: empty file")
    header, body = rows[0], rows[1:]
    col = {name: k for k, name in enumerate(header)}
    missing = [c for c in [meta.get("response", "y")] + list(meta.get("fixed", [])) if c not in col]
    for f in meta.get("factors", []):
        missing += [c for c in [f["column"]] + list(f.get("slope_columns", [])) if c not in col]
    if missing:
        raise ValueError(f"{csv_path}: missing columns {missing}")

    def column(name, dtype=float):
        k = col[name]
        return np.array([r[k] for r in body], dtype=dtype)

    y = column(meta.get("response", "y"))
    n = y.shape[0]
    X = np.column_stack([np.ones(n)] + [column(c) for c in meta.get("fixed", [])])
    factors = []
    for f in meta.get("factors", []):
        levels = column(f["column"], dtype=np.int64) - 1
        slopes = [column(c) for c in f.get("slope_columns", [])]
        z = np.column_stack([np.ones(n)] + slopes)
        if z.shape[1] != int(f["q"]):
            raise ValueError(f"factor {f['column']}: q={f['q']} but {z.shape[1]} random-effects columns")
        factors.append(GroupingFactor(levels, int(f["n_levels"]), z, name=f.get("name", f["column"])))
    return LmmProblem(FixedDesign(X), GroupedDesign(tuple(factors)), y), meta
