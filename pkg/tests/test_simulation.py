import json

import numpy as np
import pytest

from riemlmm.design import LmmProblem
from riemlmm.io import read_dataset, write_dataset
from riemlmm.manifold import SpdPoint
from riemlmm.simulation import (
    SCENARIOS,
    FactorSpec,
    Scenario,
    generate_dataset,
    replication_rng,
    scenario_random_intercepts,
    scenario_random_slope,
)


def test_random_intercepts_preset():
    sc = scenario_random_intercepts()
    assert (sc.n, sc.beta_true, sc.sigma2_true, sc.n_datasets) == (1000, (1.0, 2.0), 0.1, 100)
    assert [f.n_levels for f in sc.factors] == [15, 10]
    assert sc.factors[0].psi_true.mat[0, 0] == pytest.approx(1.2**2)
    assert sc.factors[1].psi_true.mat[0, 0] == pytest.approx(0.9**2)
    assert sc.dims == (1, 1)


def test_random_slope_preset():
    sc = scenario_random_slope()
    assert sc.dims == (1, 2)
    np.testing.assert_allclose(sc.factors[0].psi_true.mat, [[1.0]])
    psi2 = sc.factors[1].psi_true.mat
    np.testing.assert_allclose(psi2, [[1.0, 0.1], [0.1, 1.0]])
    np.testing.assert_allclose(np.linalg.eigvalsh(psi2), [0.9, 1.1])
    grouped = generate_dataset(sc, 0).problem.grouped
    assert grouped.q_total == 35


def test_scenario_validation():
    with pytest.raises(ValueError):
        Scenario(balance="loose")
    with pytest.raises(ValueError):
        Scenario(sigma2_true=0.0)
    with pytest.raises(ValueError):
        FactorSpec(3, 2, SpdPoint(np.eye(1)))
    with pytest.raises(ValueError):
        Scenario(n=5, factors=(FactorSpec(10, 1, SpdPoint(1.0)),))


def test_strict_balance_snaps_n():
    sc = scenario_random_intercepts(balance="strict")
    assert sc.n == 990
    prob = generate_dataset(sc, 0).problem
    for f, m in zip(prob.grouped.factors, (15, 10)):
        np.testing.assert_array_equal(f.level_counts(), np.full(m, 990 // m))


def test_near_balance_keeps_n():
    prob = generate_dataset(scenario_random_intercepts(), 0).problem
    assert prob.n == 1000
    for f in prob.grouped.factors:
        counts = f.level_counts()
        assert counts.max() - counts.min() <= 1


def test_generation_is_deterministic():
    sc = scenario_random_slope(seed=123)
    a, b = generate_dataset(sc, 4), generate_dataset(sc, 4)
    assert np.array_equal(a.problem.y, b.problem.y)
    assert np.array_equal(a.problem.X, b.problem.X)
    for fa, fb in zip(a.problem.grouped.factors, b.problem.grouped.factors):
        assert np.array_equal(fa.level_of_obs, fb.level_of_obs)
        assert np.array_equal(fa.z_rows, fb.z_rows)
    assert not np.array_equal(a.problem.y, generate_dataset(sc, 5).problem.y)
    assert not np.array_equal(a.problem.y, generate_dataset(scenario_random_slope(seed=124), 4).problem.y)


def test_replication_streams_independent_of_order():
    x = replication_rng(9, 3).standard_normal(5)
    replication_rng(9, 0).standard_normal(100)
    np.testing.assert_array_equal(replication_rng(9, 3).standard_normal(5), x)


def test_model_equation_holds_exactly():
    ds = generate_dataset(scenario_random_slope(n=300), 2)
    prob = ds.problem
    Zb = np.zeros(prob.n)
    for f, b in zip(prob.grouped.factors, ds.b):
        Zb += f.Z @ b.ravel()
    rhs = prob.X @ np.asarray(ds.scenario.beta_true) + Zb + ds.eps
    np.testing.assert_allclose(prob.y, rhs, rtol=0, atol=1e-12)


def test_rows_have_expected_sparsity():
    prob = generate_dataset(scenario_random_slope(n=200), 0).problem
    Z = prob.grouped.Z
    nnz = np.diff(Z.indptr)
    assert np.all(nnz <= sum(prob.dims))
    assert prob.grouped.structural_zeros_per_row() == Z.shape[1] - sum(prob.dims)


def test_noise_free_recovers_beta():
    sc = Scenario(name="quiet", n=200, sigma2_true=1e-20,
                  factors=(FactorSpec(10, 1, SpdPoint(1e-20)), FactorSpec(5, 2, SpdPoint(1e-20 * np.eye(2)))))
    prob = generate_dataset(sc, 0).problem
    beta_ols, *_ = np.linalg.lstsq(prob.X, prob.y, rcond=None)
    np.testing.assert_allclose(beta_ols, [1.0, 2.0], atol=1e-6)


def test_random_effect_draws_match_covariance():
    single = Scenario(name="lln", n=10_000, factors=(FactorSpec(10_000, 1, SpdPoint(1.44)),))
    b = generate_dataset(single, 0).b[0]
    assert np.var(b) == pytest.approx(1.44, rel=0.05)

    psi = np.array([[1.0, 0.1], [0.1, 1.0]])
    slope = Scenario(name="lln2", n=10_000, factors=(FactorSpec(10_000, 2, SpdPoint(psi)),))
    b = generate_dataset(slope, 0).b[0]
    emp = np.cov(b.T)
    assert np.linalg.norm(emp - psi) / np.linalg.norm(psi) < 0.10


def test_scenario_dict_round_trip():
    sc = scenario_random_slope(seed=77, n_datasets=3)
    again = Scenario.from_dict(json.loads(json.dumps(sc.to_dict())))
    assert again.to_dict() == sc.to_dict()
    assert set(SCENARIOS) == {"random-intercepts", "random-slope"}


def test_truth_record():
    ds = generate_dataset(scenario_random_slope(n=100), 0)
    assert ds.truth["beta_true"] == [1.0, 2.0]
    assert ds.truth["psi_true"][1] == [[1.0, 0.1], [0.1, 1.0]]


# --- dataset files --------------------------------------------------------------


def test_dataset_file_round_trip(tmp_path):
    prob = generate_dataset(scenario_random_slope(n=150), 1).problem
    csv_path, meta_path = write_dataset(prob, tmp_path / "d.csv", extra_meta={"note": "x"})
    assert meta_path.name == "d.meta.json"
    back, meta = read_dataset(csv_path)
    assert meta["K"] == 2 and meta["note"] == "x"
    assert meta["factors"][1]["slope_columns"] == ["g2_s1"]
    np.testing.assert_array_equal(back.y, prob.y)
    np.testing.assert_array_equal(back.X, prob.X)
    for a, b in zip(back.grouped.factors, prob.grouped.factors):
        np.testing.assert_array_equal(a.level_of_obs, b.level_of_obs)
        np.testing.assert_array_equal(a.z_rows, b.z_rows)
    header = csv_path.read_text().splitlines()[0].split(",")
    assert header == ["y", "x1", "g1", "g2", "g2_s1"]


def test_hand_written_dataset(tmp_path):
    (tmp_path / "h.csv").write_text("y,x1,g1\n1.0,0.5,1\n2.0,-0.5,2\n3.0,1.5,1\n4.0,0.0,2\n")
    meta = {"K": 1, "response": "y", "fixed": ["x1"],
            "factors": [{"column": "g1", "n_levels": 2, "q": 1, "slope_columns": []}]}
    (tmp_path / "h.meta.json").write_text(json.dumps(meta))
    prob, _ = read_dataset(tmp_path / "h.csv")
    assert isinstance(prob, LmmProblem)
    np.testing.assert_array_equal(prob.grouped.factors[0].level_of_obs, [0, 1, 0, 1])


def test_dataset_missing_column(tmp_path):
    (tmp_path / "h.csv").write_text("y,x1\n1.0,0.5\n2.0,-0.5\n3.0,1.5\n")
    meta = {"fixed": ["x1"], "factors": [{"column": "g1", "n_levels": 2, "q": 1}]}
    (tmp_path / "h.meta.json").write_text(json.dumps(meta))
    with pytest.raises(ValueError, match="missing columns"):
        read_dataset(tmp_path / "h.csv")
