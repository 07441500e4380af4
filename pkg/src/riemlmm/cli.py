"""Command line entry point: ``riemlmm simulate | fit | bench``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .harness import (
    EMIT_CHOICES,
    OPTIMIZERS,
    ExperimentConfig,
    extract_estimates,
    run_experiment,
    write_scenario_datasets,
)
from .io import read_dataset
from .objective import LmmObjective, gls_beta, init_theta
from .optimizers import LineSearchConfig, StoppingConfig, TrustRegionConfig, rcg_solve, rntr_solve
from .simulation import SCENARIOS, Scenario

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_REPLICATION_FAILED = 3

log = logging.getLogger("riemlmm")


class ConfigError(Exception):
    pass


def load_scenario(spec: str) -> Scenario:
    if spec in SCENARIOS:
        return SCENARIOS[spec]()
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(f"unknown scenario {spec!r}: expected one of {sorted(SCENARIOS)} or a JSON file")
    try:
        return Scenario.from_dict(json.loads(path.read_text()))
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _csv_list(text, choices, what):
    items = [t.strip() for t in text.split(",") if t.strip()]
    bad = [t for t in items if t not in choices]
    if bad or not items:
        raise ConfigError(f"invalid {what} {bad or text!r}; choose from {list(choices)}")
    return tuple(items)


def _add_solver_flags(p):
    g = p.add_argument_group("solver settings")
    g.add_argument("--delta0", type=float, default=1.0, help="initial trust-region radius")
    g.add_argument("--delta-max", type=float, default=None, help="maximal radius (default 16 * delta0)")
    g.add_argument("--max-iters", type=int, default=1000)
    g.add_argument("--rel-obj-tol", type=float, default=1e-5)
    g.add_argument("--step-len-tol", type=float, default=1e-7)
    g.add_argument("--grad-norm-tol", type=float, default=1e-3)
    g.add_argument("--beta-rule", choices=("PR+", "FR", "HS"), default="PR+", help="R-CG beta rule")
    g.add_argument("--backend", choices=("auto", "cholmod", "dense"), default="auto",
                   help="Cholesky backend for H")


def _solver_configs(args):
    try:
        tr = TrustRegionConfig(delta0=args.delta0, delta_max=args.delta_max)
        stop = StoppingConfig(max_iters=args.max_iters, rel_obj_tol=args.rel_obj_tol,
                              step_len_tol=args.step_len_tol, grad_norm_tol=args.grad_norm_tol)
        ls = LineSearchConfig(beta_rule=args.beta_rule)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return tr, stop, ls


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riemlmm", description="REML variance estimation by Riemannian optimization")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write simulated datasets as CSV + JSON")
    p.add_argument("--scenario", required=True, help="random-intercepts, random-slope or a scenario JSON file")
    p.add_argument("--reps", type=int, default=None, help="number of datasets (default: scenario n_datasets)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n", type=int, default=None, help="override the number of observations")
    p.add_argument("--balance", choices=("near", "strict"), default=None)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("fit", help="fit one dataset")
    p.add_argument("--data", required=True, type=Path, help="dataset CSV")
    p.add_argument("--meta", type=Path, default=None, help="sidecar JSON (default: <data>.meta.json)")
    p.add_argument("--optimizer", choices=OPTIMIZERS, default="rntr")
    p.add_argument("--out", type=Path, default=None, help="write the result JSON here instead of stdout")
    _add_solver_flags(p)

    p = sub.add_parser("bench", help="run a full experiment")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", help="random-intercepts, random-slope or a scenario JSON file")
    src.add_argument("--data-dir", type=Path, help="directory of dataset_<k>.csv files")
    p.add_argument("--optimizers", default="rntr,rcg")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--balance", choices=("near", "strict"), default=None)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--emit", default="csv_summary,jsonl_runs", help=f"comma list from {list(EMIT_CHOICES)}")
    p.add_argument("--workers", type=int, default=None, help="worker processes (default: all cores)")
    p.add_argument("--write-datasets", action="store_true")
    _add_solver_flags(p)
    return parser


def _scenario_from_args(args) -> Scenario:
    sc = load_scenario(args.scenario)
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "reps", None) is not None:
        over["n_datasets"] = args.reps
    if getattr(args, "n", None) is not None:
        over["n"] = args.n
    if getattr(args, "balance", None) is not None:
        over["balance"] = args.balance
    try:
        return replace(sc, **over) if over else sc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_simulate(args) -> int:
    sc = _scenario_from_args(args)
    args.out.mkdir(parents=True, exist_ok=True)
    write_scenario_datasets(sc, args.out)
    (args.out / "scenario.json").write_text(json.dumps(sc.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {sc.n_datasets} datasets to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    tr, stop, ls = _solver_configs(args)
    try:
        problem, meta = read_dataset(args.data, args.meta)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read dataset: {exc}") from exc
    objective = LmmObjective(problem, backend=args.backend)
    theta0 = init_theta(problem)
    if args.optimizer == "rntr":
        res = rntr_solve(objective, theta0, tr, stop)
    else:
        res = rcg_solve(objective, theta0, stop, ls)
    ws = objective.workspace(res.theta_final)
    out = {
        "optimizer": args.optimizer,
        "iters": res.iters,
        "termination": res.termination.value,
        "L_R": res.final_objective,
        "L_R_per_obs": res.final_objective / problem.n,
        "grad_norm": res.grad_norm_trace[-1],
        "estimates": extract_estimates(res.theta_final),
        "beta_hat": [float(b) for b in gls_beta(problem, ws)],
        "eta": res.theta_final.eta,
        "psi": [p.mat.tolist() for p in res.theta_final.psi],
        "wall_time_s": res.wall_time_seconds,
    }
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        args.out.write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    tr, stop, ls = _solver_configs(args)
    optimizers = _csv_list(args.optimizers, OPTIMIZERS, "optimizers")
    emit = _csv_list(args.emit, EMIT_CHOICES, "emit targets")
    try:
        if args.data_dir is not None:
            cfg = ExperimentConfig(dataset_dir=args.data_dir, n_reps=args.reps, optimizers=optimizers,
                                   tr_cfg=tr, stop_cfg=stop, ls_cfg=ls, output_dir=args.out, emit=emit,
                                   workers=args.workers, backend=args.backend)
        else:
            cfg = ExperimentConfig(scenario=_scenario_from_args(args), optimizers=optimizers, tr_cfg=tr,
                                   stop_cfg=stop, ls_cfg=ls, output_dir=args.out, emit=emit,
                                   workers=args.workers, backend=args.backend,
                                   write_datasets=args.write_datasets)
        reps = cfg.replications()
    except (ValueError, FileNotFoundError) as exc:
        raise ConfigError(str(exc)) from exc
    log.info("running %d replications with %s", len(reps), ",".join(optimizers))
    summary, _ = run_experiment(cfg)
    for name, row in summary.rows.items():
        mses = " ".join(f"{k}={v:.4g}" for k, v in row.items() if k.startswith("mse_"))
        print(f"{name}: runs={row['n_runs']} failed={row['n_failed']} "
              f"av_iters={row.get('av_iters', float('nan')):.2f} {mses}")
    return EXIT_REPLICATION_FAILED if summary.n_failed else EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    handlers = {"simulate": cmd_simulate, "fit": cmd_fit, "bench": cmd_bench}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
