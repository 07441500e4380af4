"""Synthetic crossed-design data sets for variance-estimation experiments.

Two presets reproduce the experimental settings: two random intercepts, and a
random intercept plus a correlated random intercept/slope pair on the second
factor.  Each replication draws from its own RNG stream derived from
``(seed, replication_index)``, so data sets can be generated independently and
in any order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .design import FixedDesign, GroupedDesign, GroupingFactor, LmmProblem
from .manifold import SpdPoint


@dataclass(frozen=True)
class FactorSpec:
    n_levels: int
    q: int
    psi_true: SpdPoint

    def __post_init__(self):
        psi = self.psi_true if isinstance(self.psi_true, SpdPoint) else SpdPoint(self.psi_true)
        if psi.dim != self.q:
            raise ValueError(f"psi_true has dim {psi.dim}, expected q={self.q}")
        if self.n_levels < 1:
            raise ValueError("n_levels must be positive")
        object.__setattr__(self, "psi_true", psi)


@dataclass(frozen=True)
class Scenario:
    """Simulation settings.

    ``balance="near"`` assigns levels round-robin after a shuffle, so level counts
    differ by at most one; ``balance="strict"`` additionally snaps ``n`` down to a
    multiple of ``lcm(M_1, ..., M_K)`` so every level has identical counts.
    """

    name: str = "custom"
    n: int = 1000
    beta_true: tuple = (1.0, 2.0)
    sigma2_true: float = 0.1
    factors: tuple = ()
    n_datasets: int = 100
    seed: int = 0
    balance: str = "near"

    def __post_init__(self):
        if self.balance not in ("near", "strict"):
            raise ValueError("balance must be 'near' or 'strict'")
        if self.sigma2_true <= 0:
            raise ValueError("sigma2_true must be positive")
        if len(self.beta_true) < 1:
            raise ValueError("need at least an intercept")
        object.__setattr__(self, "beta_true", tuple(float(b) for b in self.beta_true))
        object.__setattr__(self, "factors", tuple(self.factors))
        if self.balance == "strict":
            object.__setattr__(self, "n", self.effective_n)
        if any(self.n < f.n_levels for f in self.factors):
            raise ValueError("n is smaller than a number of levels")
        if self.n <= self.p:
            raise ValueError("need n > p")

    @property
    def p(self) -> int:
        return len(self.beta_true)

    @property
    def effective_n(self) -> int:
        if self.balance == "near" or not self.factors:
            return self.n
        m = math.lcm(*(f.n_levels for f in self.factors))
        n = (self.n // m) * m
        if n == 0:
            raise ValueError(f"n={self.n} is smaller than lcm of the level counts ({m})")
        return n

    @property
    def dims(self) -> tuple:
        return tuple(f.q for f in self.factors)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n": self.n,
            "beta_true": list(self.beta_true),
            "sigma2_true": self.sigma2_true,
            "factors": [
                {"n_levels": f.n_levels, "q": f.q, "psi_true": f.psi_true.mat.tolist()} for f in self.factors
            ],
            "n_datasets": self.n_datasets,
            "seed": self.seed,
            "balance": self.balance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        factors = tuple(
            FactorSpec(int(f["n_levels"]), int(f["q"]), SpdPoint(np.array(f["psi_true"], dtype=float)))
            for f in d.get("factors", [])
        )
        return cls(
            name=d.get("name", "custom"),
            n=int(d.get("n", 1000)),
            beta_true=tuple(d.get("beta_true", (1.0, 2.0))),
            sigma2_true=float(d.get("sigma2_true", 0.1)),
            factors=factors,
            n_datasets=int(d.get("n_datasets", 100)),
            seed=int(d.get("seed", 0)),
            balance=d.get("balance", "near"),
        )


def scenario_random_intercepts(**overrides) -> Scenario:
    """Two crossed random intercepts: tau_1 = 1.2, tau_2 = 0.9, M = (15, 10), sigma^2 = 0.1."""
    sc = Scenario(
        name="random-intercepts",
        factors=(
            FactorSpec(15, 1, SpdPoint([[1.2**2]])),
            FactorSpec(10, 1, SpdPoint([[0.9**2]])),
        ),
    )
    return replace(sc, **overrides) if overrides else sc


def scenario_random_slope(**overrides) -> Scenario:
    """Random intercept on factor 1, correlated intercept and slope on factor 2 (rho = 0.1)."""
    tau21 = tau22 = 1.0
    rho2 = 0.1
    psi2 = [[tau21**2, rho2 * tau21 * tau22], [rho2 * tau21 * tau22, tau22**2]]
    sc = Scenario(
        name="random-slope",
        factors=(
            FactorSpec(15, 1, SpdPoint([[1.0]])),
            FactorSpec(10, 2, SpdPoint(psi2)),
        ),
    )
    return replace(sc, **overrides) if overrides else sc


SCENARIOS = {
    "random-intercepts": scenario_random_intercepts,
    "random-slope": scenario_random_slope,
}


@dataclass(frozen=True, eq=False)
class Dataset:
    problem: LmmProblem
    scenario: Scenario
    replication_index: int
    b: tuple = field(default=())
    eps: np.ndarray | None = None
    slopes: tuple = ()

    @property
    def truth(self) -> dict:
        return {
            "beta_true": list(self.scenario.beta_true),
            "sigma2_true": self.scenario.sigma2_true,
            "psi_true": [f.psi_true.mat.tolist() for f in self.scenario.factors],
        }


def replication_rng(seed: int, replication_index: int) -> np.random.Generator:
    """Independent stream for one replication, keyed on ``(seed, replication_index)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(replication_index),))
    return np.random.Generator(np.random.PCG64(ss))


def generate_dataset(scenario: Scenario, replication_index: int) -> Dataset:
    """Draw one data set ``y = X beta + Z b + eps`` for the scenario."""
    rng = replication_rng(scenario.seed, replication_index)
    n, p = scenario.n, scenario.p
    X = np.column_stack([np.ones(n)] + [rng.standard_normal(n) for _ in range(p - 1)])

    factors, bs, slopes = [], [], []
    for j, spec in enumerate(scenario.factors):
        levels = rng.permutation(np.arange(n) % spec.n_levels)
        cols = [np.ones(n)]
        for _ in range(spec.q - 1):
            cols.append(rng.standard_normal(n))
        z = np.column_stack(cols)
        slopes.append(z[:, 1:])
        factors.append(GroupingFactor(levels, spec.n_levels, z, name=f"g{j + 1}"))
        b = rng.standard_normal((spec.n_levels, spec.q)) @ spec.psi_true.chol.T
        bs.append(b)

    eps = math.sqrt(scenario.sigma2_true) * rng.standard_normal(n)
    y = X @ np.asarray(scenario.beta_true) + eps
    for f, b in zip(factors, bs):
        y = y + np.einsum("iq,iq->i", f.z_rows, b[f.level_of_obs])
    problem = LmmProblem(FixedDesign(X), GroupedDesign(tuple(factors)), y)
    return Dataset(problem, scenario, int(replication_index), b=tuple(bs), eps=eps, slopes=tuple(slopes))
