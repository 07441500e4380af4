"""Fixed and random-effects design matrices of a linear mixed model.

The random-effects design is stored per grouping factor.  Observation ``i`` of
factor ``j`` sits in level ``l = level_of_obs[i]`` and contributes the row
``z_rows[i]`` (length ``q_j``) to columns ``l*q_j .. (l+1)*q_j - 1`` of ``Z_j``; every
other column of that row is a structural zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

RANK_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class FixedDesign:
    """Dense ``n x p`` fixed-effects design with full column rank."""

    X: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=float, copy=True)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise ValueError("X must be two-dimensional")
        n, p = X.shape
        if p < 1 or n <= p:
            raise ValueError(f"need n > p >= 1, got n={n}, p={p}")
        if not np.all(np.isfinite(X)):
            raise ValueError("X has non-finite entries")
        r = sla.qr(X, mode="r", pivoting=True)[0]
        d = np.abs(np.diag(r))
        if d[0] == 0.0 or np.any(d < RANK_TOL * d[0]):
            raise ValueError("X is column-rank deficient")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True, eq=False)
class GroupingFactor:
    """One grouping factor: 0-based level per observation plus the per-row content of ``Z_j``."""

    level_of_obs: np.ndarray
    n_levels: int
    z_rows: np.ndarray
    name: str = ""

    def __post_init__(self):
        lev = np.asarray(self.level_of_obs)
        if lev.ndim != 1:
            raise ValueError("level_of_obs must be one-dimensional")
        if not np.issubdtype(lev.dtype, np.integer):
            if not np.all(lev == np.round(lev)):
                raise ValueError("levels must be integers")
        lev = lev.astype(np.int64)
        m = int(self.n_levels)
        if m < 1 or lev.min(initial=0) < 0 or lev.max(initial=0) >= m:
            raise ValueError(f"levels must lie in 0..{m - 1}")
        z = np.array(self.z_rows, dtype=float, copy=True)
        if z.ndim == 1:
            z = z[:, None]
        if z.shape[0] != lev.shape[0] or z.shape[1] < 1:
            raise ValueError("z_rows must be n x q with q >= 1")
        if not np.all(np.isfinite(z)):
            raise ValueError("z_rows has non-finite entries")
        lev.setflags(write=False)
        z.setflags(write=False)
        object.__setattr__(self, "level_of_obs", lev)
        object.__setattr__(self, "n_levels", m)
        object.__setattr__(self, "z_rows", z)

    @classmethod
    def intercept(cls, level_of_obs, n_levels, name=""):
        n = len(level_of_obs)
        return cls(level_of_obs, n_levels, np.ones((n, 1)), name=name)

    @property
    def n(self) -> int:
        return self.level_of_obs.shape[0]

    @property
    def q(self) -> int:
        return self.z_rows.shape[1]

    @property
    def width(self) -> int:
        """Number of columns ``M_j q_j`` of ``Z_j``."""
        return self.n_levels * self.q

    @cached_property
    def Zt(self) -> sp.csc_matrix:
        """``Z_j^T`` in CSC layout: column ``i`` holds ``z_rows[i]`` at rows ``l_i q .. l_i q + q - 1``."""
        n, q = self.n, self.q
        rows = (self.level_of_obs[:, None] * q + np.arange(q)[None, :]).ravel()
        indptr = np.arange(0, n * q + 1, q)
        zt = sp.csc_matrix((self.z_rows.ravel(), rows, indptr), shape=(self.width, n))
        zt.has_sorted_indices = True
        return zt

    @cached_property
    def Z(self) -> sp.csr_matrix:
        return self.Zt.T.tocsr()

    def level_counts(self) -> np.ndarray:
        return np.bincount(self.level_of_obs, minlength=self.n_levels)


@dataclass(frozen=True, eq=False)
class GroupedDesign:
    """The blocked random-effects design ``Z = (Z_1, ..., Z_K)``."""

    factors: tuple

    def __post_init__(self):
        factors = tuple(self.factors)
        if factors:
            n = factors[0].n
            if any(f.n != n for f in factors):
                raise ValueError("all grouping factors must cover the same observations")
        object.__setattr__(self, "factors", factors)

    @property
    def K(self) -> int:
        return len(self.factors)

    @property
    def n(self):
        return self.factors[0].n if self.factors else None

    @property
    def dims(self) -> tuple:
        return tuple(f.q for f in self.factors)

    @property
    def q_total(self) -> int:
        return sum(f.width for f in self.factors)

    @cached_property
    def offsets(self) -> np.ndarray:
        """Column offsets of each ``Z_j`` inside ``Z``; length ``K + 1``."""
        return np.concatenate([[0], np.cumsum([f.width for f in self.factors])]).astype(int)

    @cached_property
    def Z(self) -> sp.csr_matrix:
        if not self.factors:
            raise ValueError("design has no grouping factors")
        return sp.hstack([f.Z for f in self.factors], format="csr")

    def structural_zeros_per_row(self) -> int:
        return sum((f.n_levels - 1) * f.q for f in self.factors)


@dataclass(frozen=True, eq=False)
class LmmProblem:
    """Data of ``y = X beta + Z b + eps`` needed for REML estimation."""

    fixed: FixedDesign
    grouped: GroupedDesign
    y: np.ndarray

    def __post_init__(self):
        y = np.array(self.y, dtype=float, copy=True).ravel()
        if y.shape[0] != self.fixed.n:
            raise ValueError("y and X have different numbers of rows")
        if self.grouped.K and self.grouped.n != self.fixed.n:
            raise ValueError("Z and X have different numbers of rows")
        if not np.all(np.isfinite(y)):
            raise ValueError("y has non-finite entries")
        y.setflags(write=False)
        object.__setattr__(self, "y", y)

    @classmethod
    def from_arrays(cls, X, y, levels: Sequence = (), z_rows: Sequence | None = None, n_levels: Sequence | None = None):
        """Build a problem from plain arrays; ``levels`` are 0-based, ``z_rows`` default to intercepts."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        factors = []
        for j, lev in enumerate(levels):
            lev = np.asarray(lev)
            m = int(n_levels[j]) if n_levels is not None else int(lev.max()) + 1
            z = np.ones((len(lev), 1)) if z_rows is None or z_rows[j] is None else z_rows[j]
            factors.append(GroupingFactor(lev, m, z, name=f"g{j + 1}"))
        return cls(FixedDesign(X), GroupedDesign(tuple(factors)), y)

    @property
    def n(self) -> int:
        return self.fixed.n

    @property
    def p(self) -> int:
        return self.fixed.p

    @property
    def X(self) -> np.ndarray:
        return self.fixed.X

    @property
    def dims(self) -> tuple:
        return self.grouped.dims
