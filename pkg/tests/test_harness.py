import csv
import math

import numpy as np
import pytest

from riemlmm.harness import (
    TIMING_FIELDS,
    ExperimentConfig,
    deviation_LR,
    extract_estimates,
    mse,
    read_jsonl,
    run_experiment,
    run_replication,
    summarize,
    truth_theta,
    write_jsonl,
    write_scenario_datasets,
)
from riemlmm.manifold import ThetaPoint
from riemlmm.objective import evaluate
from riemlmm.simulation import generate_dataset, scenario_random_intercepts, scenario_random_slope


def tiny(make=scenario_random_intercepts, **kw):
    kw.setdefault("n", 150)
    kw.setdefault("n_datasets", 2)
    kw.setdefault("seed", 8)
    return make(**kw)


def test_extract_estimates_examples():
    assert extract_estimates(ThetaPoint(0.0, ([[1.44]],)))["tau1"] == pytest.approx(1.2)
    est = extract_estimates(ThetaPoint(0.0, ([[1.0, 0.1], [0.1, 1.0]],)))
    assert est["rho1"] == pytest.approx(0.1)
    assert est["tau1_1"] == pytest.approx(1.0) and est["tau1_2"] == pytest.approx(1.0)
    assert extract_estimates(ThetaPoint(np.log(0.1), ()))["sigma"] == pytest.approx(0.3162, abs=1e-4)


def test_extract_estimates_scale_by_residual_variance():
    # Psi is relative to sigma^2, so the reported SD is sqrt(sigma^2 Psi)
    theta = truth_theta(0.1, [[[1.44]], [[1.0, 0.1], [0.1, 1.0]]])
    est = extract_estimates(theta)
    assert est["tau1"] == pytest.approx(1.2)
    assert est["tau2_1"] == pytest.approx(1.0) and est["rho2"] == pytest.approx(0.1)
    assert est["sigma"] == pytest.approx(np.sqrt(0.1))
    np.testing.assert_allclose(theta.psi[0].mat, [[14.4]])


def test_mse_examples():
    assert mse([2.0, 2.0, 2.0], 2.0) == 0.0
    assert mse([1.0, 3.0], 2.0) == 1.0
    with pytest.raises(ValueError):
        mse([], 1.0)


def test_deviation_examples():
    assert deviation_LR(5.0, 3.0) == 2.0
    assert deviation_LR(3.0, 5.0) == 2.0
    prob = generate_dataset(scenario_random_intercepts(n=100), 0).problem
    th = truth_theta(0.1, [[[1.44]], [[0.81]]])
    L, _ = evaluate(prob, th)
    assert deviation_LR(L, L) == 0.0


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        ExperimentConfig(scenario=tiny(), optimizers=())
    with pytest.raises(ValueError):
        ExperimentConfig(scenario=tiny(), optimizers=("bfgs",))
    with pytest.raises(ValueError):
        ExperimentConfig()
    with pytest.raises(ValueError):
        ExperimentConfig(scenario=tiny(), emit=("xml",))
    with pytest.raises(FileNotFoundError):
        ExperimentConfig(dataset_dir=tmp_path).replications()


def test_single_dataset_two_rows():
    summary, records = run_experiment(ExperimentConfig(scenario=tiny(n_datasets=1), workers=1))
    assert list(summary.rows) == ["rntr", "rcg"]
    assert len(records) == 2
    for rec in records:
        assert rec["status"] == "ok"
        assert math.isfinite(rec["deviation_LR"]) and rec["deviation_LR"] >= 0
        assert set(rec["estimates"]) == {"tau1", "tau2", "sigma"}
    for row in summary.rows.values():
        assert all(row[k] >= 0 for k in row if k.startswith("mse_"))


def test_setting2_estimate_keys():
    records, _ = run_replication(ExperimentConfig(scenario=tiny(scenario_random_slope), optimizers=("rntr",)), 0)
    assert set(records[0]["estimates"]) == {"tau1", "tau2_1", "tau2_2", "rho2", "sigma"}
    assert records[0]["truth"]["rho2"] == pytest.approx(0.1)


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    cfg = ExperimentConfig(scenario=tiny(n_datasets=3), output_dir=out, workers=2,
                           emit=("csv_summary", "jsonl_runs", "trace_csv"))
    summary, records = run_experiment(cfg)
    return out, summary, records


def test_outputs_written(experiment):
    out, summary, records = experiment
    assert {p.name for p in out.iterdir()} == {"runs.jsonl", "summary.csv", "traces.csv"}
    assert [r["replication"] for r in records] == [0, 0, 1, 1, 2, 2]
    with open(out / "traces.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["optimizer"] for r in rows} == {"rntr", "rcg"}


def test_jsonl_round_trip(experiment, tmp_path):
    out, _, records = experiment
    assert read_jsonl(out / "runs.jsonl") == records
    write_jsonl(records, tmp_path / "again.jsonl")
    assert (tmp_path / "again.jsonl").read_bytes() == (out / "runs.jsonl").read_bytes()


def test_summary_recomputed_from_jsonl(experiment):
    out, _, _ = experiment
    recs = read_jsonl(out / "runs.jsonl")
    with open(out / "summary.csv") as fh:
        rows = {r["optimizer"]: r for r in csv.DictReader(fh)}
    assert {"av_iters", "av_runtime_s", "av_LR", "av_deviation_LR", "mse_tau1", "mse_tau2", "mse_sigma"} <= set(
        rows["rntr"])
    for name, row in rows.items():
        mine = [r for r in recs if r["optimizer"] == name]
        assert float(row["av_iters"]) == pytest.approx(np.mean([r["iters"] for r in mine]), rel=1e-12)
        assert float(row["av_LR"]) == pytest.approx(np.mean([r["L_R"] for r in mine]), rel=1e-12)
        assert float(row["av_deviation_LR"]) == pytest.approx(np.mean([r["deviation_LR"] for r in mine]), rel=1e-12)
        for key in ("tau1", "tau2", "sigma"):
            expected = np.mean([(r["estimates"][key] - r["truth"][key]) ** 2 for r in mine])
            assert float(row[f"mse_{key}"]) == pytest.approx(expected, rel=1e-12)


def _strip_timing(records):
    return [{k: v for k, v in r.items() if k not in TIMING_FIELDS} for r in records]


def test_serial_and_parallel_agree(experiment):
    _, _, records = experiment
    _, serial = run_experiment(ExperimentConfig(scenario=tiny(n_datasets=3), workers=1))
    assert _strip_timing(serial) == _strip_timing(records)


def test_dataset_dir_mode(tmp_path):
    sc = tiny(n_datasets=2)
    write_scenario_datasets(sc, tmp_path)
    _, from_files = run_experiment(ExperimentConfig(dataset_dir=tmp_path, workers=1))
    _, direct = run_experiment(ExperimentConfig(scenario=sc, workers=1))
    assert _strip_timing(from_files) == _strip_timing(direct)


def test_failures_recorded_and_excluded(tmp_path):
    sc = tiny(n_datasets=2)
    write_scenario_datasets(sc, tmp_path)
    path = tmp_path / "dataset_1.csv"
    lines = path.read_text().splitlines()
    lines[1] = "nan," + lines[1].split(",", 1)[1]
    path.write_text("\n".join(lines) + "\n")
    summary, records = run_experiment(ExperimentConfig(dataset_dir=tmp_path, workers=1, optimizers=("rntr",)))
    assert [r["status"] for r in records] == ["ok", "failed"]
    assert "ValueError" in records[1]["error"]
    assert summary.n_failed == 1
    assert summary.rows["rntr"]["n_runs"] == 1 and summary.rows["rntr"]["n_failed"] == 1
    assert summary.rows["rntr"]["av_iters"] == records[0]["iters"]


def test_summarize_all_failed():
    summary = summarize([{"optimizer": "rcg", "status": "failed"}])
    assert summary.rows["rcg"] == {"n_runs": 0, "n_failed": 1}


@pytest.mark.slow
def test_setting1_mse_tau1_band_at_100_replications():
    sc = scenario_random_intercepts(seed=2024, n_datasets=100)
    summary, _ = run_experiment(ExperimentConfig(scenario=sc, optimizers=("rntr",)))
    assert summary.n_failed == 0
    assert 0.0 <= summary.rows["rntr"]["mse_tau1"] <= 2 * 0.0427
