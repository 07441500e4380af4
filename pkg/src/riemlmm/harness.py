"""Batch experiments: fit many simulated data sets and aggregate estimation metrics."""
from __future__ import annotations

import csv
import json
import logging
import math
import multiprocessing
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import read_dataset, write_dataset
from .manifold import ThetaPoint
from .objective import LmmObjective, evaluate, gls_beta, init_theta
from .optimizers import (
    LineSearchConfig,
    StoppingConfig,
    TrustRegionConfig,
    rcg_solve,
    rntr_solve,
)
from .simulation import Scenario, generate_dataset

log = logging.getLogger(__name__)

OPTIMIZERS = ("rntr", "rcg")
EMIT_CHOICES = ("csv_summary", "jsonl_runs", "trace_csv")
# excluded from determinism comparisons
TIMING_FIELDS = ("wall_time_s", "av_runtime_s")


@dataclass
class ExperimentConfig:
    scenario: Scenario | None = None
    dataset_dir: Path | None = None
    optimizers: tuple = OPTIMIZERS
    tr_cfg: TrustRegionConfig = field(default_factory=TrustRegionConfig)
    stop_cfg: StoppingConfig = field(default_factory=StoppingConfig)
    ls_cfg: LineSearchConfig = field(default_factory=LineSearchConfig)
    output_dir: Path | None = None
    emit: tuple = ("csv_summary", "jsonl_runs")
    n_reps: int | None = None
    workers: int | None = None
    backend: str = "auto"
    write_datasets: bool = False

    def __post_init__(self):
        self.optimizers = tuple(self.optimizers)
        if not self.optimizers:
            raise ValueError("select at least one optimizer")
        bad = [o for o in self.optimizers if o not in OPTIMIZERS]
        if bad:
            raise ValueError(f"unknown optimizers {bad}; choose from {OPTIMIZERS}")
        bad = [e for e in self.emit if e not in EMIT_CHOICES]
        if bad:
            raise ValueError(f"unknown emit targets {bad}")
        if (self.scenario is None) == (self.dataset_dir is None):
            raise ValueError("give exactly one of scenario or dataset_dir")
        if self.dataset_dir is not None:
            self.dataset_dir = Path(self.dataset_dir)
        if self.output_dir is not None:
            self.output_dir = Path(self.output_dir)

    def replications(self) -> list:
        if self.dataset_dir is not None:
            files = sorted(self.dataset_dir.glob("dataset_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
            if not files:
                raise FileNotFoundError(f"no dataset_<k>.csv files in {self.dataset_dir}")
            idx = [int(p.stem.split("_")[1]) for p in files]
            return idx[: self.n_reps] if self.n_reps else idx
        return list(range(self.n_reps if self.n_reps is not None else self.scenario.n_datasets))


def extract_estimates(theta: ThetaPoint) -> dict:
    """Standard deviations and correlations from a fitted point.

    ``Psi_j`` is relative to the residual variance (``Var(y) = sigma^2 H``), so the
    random-effects covariance is ``sigma^2 Psi_j``.  Keys: ``tau{j}`` for scalar
    factors; ``tau{j}_{a}`` and ``rho{j}`` (or ``rho{j}_{a}{b}`` when ``q_j > 2``)
    otherwise; ``sigma`` last.
    """
    out = {}
    s2 = float(np.exp(theta.eta))
    for j, psi in enumerate(theta.psi, start=1):
        m = s2 * psi.mat
        q = m.shape[0]
        if q == 1:
            out[f"tau{j}"] = float(np.sqrt(m[0, 0]))
            continue
        sd = np.sqrt(np.diag(m))
        for a in range(q):
            out[f"tau{j}_{a + 1}"] = float(sd[a])
        for a in range(q):
            for b in range(a + 1, q):
                key = f"rho{j}" if q == 2 else f"rho{j}_{a + 1}{b + 1}"
                out[key] = float(m[a, b] / (sd[a] * sd[b]))
    out["sigma"] = float(np.exp(theta.eta / 2.0))
    return out


def mse(estimates, truth: float) -> float:
    est = np.asarray(list(estimates), dtype=float)
    if est.size == 0:
        raise ValueError("mse of an empty list")
    return float(np.mean((est - truth) ** 2))


def deviation_LR(L_at_thetahat: float, L_at_truth: float) -> float:
    return abs(L_at_thetahat - L_at_truth)


def truth_theta(sigma2: float, psi_true) -> ThetaPoint:
    """Data-generating point on the manifold: ``(log sigma^2, Psi_true / sigma^2)``."""
    return ThetaPoint(np.log(sigma2), tuple(np.asarray(p, dtype=float) / sigma2 for p in psi_true))


def _truth_theta(meta_truth: dict) -> ThetaPoint | None:
    if not meta_truth:
        return None
    return truth_theta(meta_truth["sigma2_true"], meta_truth["psi_true"])


def _load_replication(config: ExperimentConfig, rep: int):
    if config.dataset_dir is not None:
        problem, meta = read_dataset(config.dataset_dir / f"dataset_{rep}.csv")
        return problem, meta.get("truth"), meta.get("seed")
    ds = generate_dataset(config.scenario, rep)
    return ds.problem, ds.truth, config.scenario.seed


def _solve(name, objective, theta0, config):
    if name == "rntr":
        return rntr_solve(objective, theta0, config.tr_cfg, config.stop_cfg)
    return rcg_solve(objective, theta0, config.stop_cfg, config.ls_cfg)


def run_replication(config: ExperimentConfig, rep: int):
    """Fit one data set with every selected optimizer; returns ``(records, trace_rows)``."""
    try:
        problem, truth, seed = _load_replication(config, rep)
        theta_true = _truth_theta(truth)
        L_true = None
        if theta_true is not None:
            L_true, _ = evaluate(problem, theta_true, backend=config.backend)
    except Exception as exc:  # unreadable data set: every optimizer fails for this replication
        log.warning("replication %s could not be prepared: %s", rep, exc)
        err = f"{type(exc).__name__}: {exc}"
        return [{"replication": rep, "seed": None, "optimizer": name, "status": "failed", "error": err}
                for name in config.optimizers], []
    records, traces = [], []
    for name in config.optimizers:
        rec = {"replication": rep, "seed": seed, "optimizer": name}
        try:
            objective = LmmObjective(problem, backend=config.backend)
            theta0 = init_theta(problem)
            res = _solve(name, objective, theta0, config)
            ws = objective.workspace(res.theta_final)
            L = res.final_objective
            rec.update(
                status="ok",
                error=None,
                iters=res.iters,
                termination=res.termination.value,
                L_R=L,
                L_R_per_obs=L / problem.n,
                L_R_truth=L_true,
                deviation_LR=deviation_LR(L, L_true) if L_true is not None else None,
                grad_norm=res.grad_norm_trace[-1],
                inner_iters_total=int(sum(res.inner_iters_trace)),
                estimates=extract_estimates(res.theta_final),
                truth=extract_estimates(theta_true) if theta_true is not None else None,
                beta_hat=[float(b) for b in gls_beta(problem, ws)],
                wall_time_s=res.wall_time_seconds,
            )
            traces.extend(
                {"replication": rep, "optimizer": name, "iter": k, "objective": fv, "grad_norm": gv}
                for k, (fv, gv) in enumerate(zip(res.objective_trace, res.grad_norm_trace))
            )
        except Exception as exc:  # recorded, excluded from averages
            log.warning("replication %s optimizer %s failed: %s", rep, name, exc)
            rec.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        records.append(rec)
    return records, traces


def _run_replication_star(args):
    return run_replication(*args)


@dataclass
class MetricsSummary:
    """Per-optimizer averages and mean squared errors."""

    rows: dict
    n_failed: int = 0

    def columns(self) -> list:
        cols = ["optimizer", "n_runs", "n_failed", "av_iters", "median_iters", "av_runtime_s",
                "av_LR", "av_LR_per_obs", "av_deviation_LR"]
        extra = []
        for r in self.rows.values():
            extra += [k for k in r if k.startswith("mse_") and k not in extra]
        return cols + extra

    def write_csv(self, path):
        cols = self.columns()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for name, r in self.rows.items():
                w.writerow([name] + [_cell(r.get(c)) for c in cols[1:]])


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(math.fsum(vals) / len(vals)) if vals else None


def summarize(records: list, optimizers=None) -> MetricsSummary:
    """Aggregate per-replication records; failed runs are counted and skipped."""
    optimizers = optimizers or list(dict.fromkeys(r["optimizer"] for r in records))
    rows, total_failed = {}, 0
    for name in optimizers:
        recs = [r for r in records if r["optimizer"] == name]
        ok = [r for r in recs if r.get("status") == "ok"]
        failed = len(recs) - len(ok)
        total_failed += failed
        row = {"n_runs": len(ok), "n_failed": failed}
        if ok:
            row.update(
                av_iters=_mean(float(r["iters"]) for r in ok),
                median_iters=float(statistics.median(r["iters"] for r in ok)),
                av_runtime_s=_mean(r["wall_time_s"] for r in ok),
                av_LR=_mean(r["L_R"] for r in ok),
                av_LR_per_obs=_mean(r["L_R_per_obs"] for r in ok),
                av_deviation_LR=_mean(r.get("deviation_LR") for r in ok),
            )
            with_truth = [r for r in ok if r.get("truth")]
            if with_truth:
                for key in with_truth[0]["estimates"]:
                    vals = [(r["estimates"][key], r["truth"][key]) for r in with_truth]
                    row[f"mse_{key}"] = float(math.fsum((e - t) ** 2 for e, t in vals) / len(vals))
        rows[name] = row
    return MetricsSummary(rows, total_failed)


def write_jsonl(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_traces(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replication", "optimizer", "iter", "objective", "grad_norm"])
        for r in rows:
            w.writerow([r["replication"], r["optimizer"], r["iter"], repr(r["objective"]), repr(r["grad_norm"])])


def write_scenario_datasets(scenario: Scenario, out_dir, reps=None):
    """Write ``dataset_<k>.csv`` + ``dataset_<k>.meta.json`` for each replication."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reps = range(scenario.n_datasets) if reps is None else reps
    paths = []
    for k in reps:
        ds = generate_dataset(scenario, k)
        paths.append(write_dataset(ds.problem, out_dir / f"dataset_{k}.csv",
                                   extra_meta={"truth": ds.truth, "seed": scenario.seed, "replication_index": k,
                                               "scenario": scenario.to_dict()}))
    return paths


def run_experiment(config: ExperimentConfig):
    """Run every replication, aggregate, and write the requested outputs.

    Returns ``(summary, records)``; records are ordered by replication then optimizer,
    independent of worker scheduling.
    """
    reps = config.replications()
    workers = config.workers or os.cpu_count() or 1
    workers = max(1, min(workers, len(reps)))
    results = {}
    if workers == 1:
        for rep in reps:
            results[rep] = run_replication(config, rep)
    else:
        # spawn, not fork: forking a parent with live BLAS/CHOLMOD threads can deadlock
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            for rep, out in zip(reps, pool.map(_run_replication_star, [(config, r) for r in reps])):
                results[rep] = out
    records, traces = [], []
    for rep in reps:
        records.extend(results[rep][0])
        traces.extend(results[rep][1])
    summary = summarize(records, list(config.optimizers))

    if config.output_dir is not None:
        out = config.output_dir
        out.mkdir(parents=True, exist_ok=True)
        if "jsonl_runs" in config.emit:
            write_jsonl(records, out / "runs.jsonl")
        if "csv_summary" in config.emit:
            summary.write_csv(out / "summary.csv")
        if "trace_csv" in config.emit:
            write_traces(traces, out / "traces.csv")
        if config.write_datasets and config.scenario is not None:
            write_scenario_datasets(config.scenario, out, reps)
    return summary, records
