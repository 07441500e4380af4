"""Sparse assembly and Cholesky factorization of ``H = I + Z G Z^T``.

Two observations interact in ``H`` only if they share a level of some grouping
factor, so the positions of the potential nonzeros are a property of the design
alone.  :class:`HPattern` computes them once; :class:`HFactorization` refills the
values for each new ``(Psi_1, ..., Psi_K)`` and refactors numerically while keeping
the symbolic analysis (and its fill-reducing ordering) frozen.
"""
from __future__ import annotations

import logging
import weakref

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .manifold import NotPositiveDefiniteError

log = logging.getLogger(__name__)

try:
    from sksparse import cholmod as _cholmod
except ImportError:  # pragma: no cover - depends on the environment
    _cholmod = None

_PATTERN_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def cholmod_available() -> bool:
    return _cholmod is not None


def resolve_backend(backend: str) -> str:
    if backend == "auto":
        return "cholmod" if _cholmod is not None else "dense"
    if backend == "cholmod" and _cholmod is None:
        raise RuntimeError("scikit-sparse (CHOLMOD) is not installed")
    if backend not in ("cholmod", "dense"):
        raise ValueError(f"unknown backend {backend!r}")
    return backend


class HPattern:
    """Fixed CSC sparsity pattern of ``H`` and the per-factor scatter maps into it."""

    def __init__(self, grouped):
        n = grouped.n
        self.n = n
        self.dims = grouped.dims
        ind = sp.identity(n, format="csc")
        for f in grouped.factors:
            e = sp.csc_matrix((np.ones(n), (np.arange(n), f.level_of_obs)), shape=(n, f.n_levels))
            ind = ind + e @ e.T
        ind = ind.tocsc()
        ind.sort_indices()
        self.indices = ind.indices.astype(np.int32)
        self.indptr = ind.indptr.astype(np.int32)
        rows = self.indices.astype(np.int64)
        cols = np.repeat(np.arange(n), np.diff(self.indptr))
        self.diag_pos = np.flatnonzero(rows == cols)
        # per factor: pattern slots sharing a level, and z_i (x) z_k at those slots
        self._scatter = []
        for f in grouped.factors:
            lev = f.level_of_obs
            pos = np.flatnonzero(lev[rows] == lev[cols])
            zr, zc = f.z_rows[rows[pos]], f.z_rows[cols[pos]]
            outer = (zr[:, :, None] * zc[:, None, :]).reshape(len(pos), -1)
            self._scatter.append((pos, outer))

    @property
    def nnz(self) -> int:
        return self.indices.shape[0]

    @classmethod
    def for_design(cls, grouped) -> "HPattern":
        pat = _PATTERN_CACHE.get(grouped)
        if pat is None:
            pat = cls(grouped)
            _PATTERN_CACHE[grouped] = pat
        return pat

    def values(self, psi) -> np.ndarray:
        """Entries of ``I + sum_j Z_j G_j Z_j^T`` at the pattern positions."""
        if tuple(p.shape[0] for p in psi) != self.dims:
            raise ValueError(f"Psi dims {[p.shape[0] for p in psi]} do not match design {self.dims}")
        vals = np.zeros(self.nnz)
        vals[self.diag_pos] = 1.0
        for (pos, outer), m in zip(self._scatter, psi):
            vals[pos] += outer @ np.asarray(m, dtype=float).ravel()
        return vals

    def matrix(self, values) -> sp.csc_matrix:
        return sp.csc_matrix((values, self.indices, self.indptr), shape=(self.n, self.n))


class HFactorization:
    """Mutable scratch owning the current values of ``H`` and their Cholesky factor.

    Not thread-safe; use one instance per concurrent solver run.
    """

    def __init__(self, pattern: HPattern, backend: str = "auto"):
        self.pattern = pattern
        self.backend = resolve_backend(backend)
        self.values = None
        self.logdet_H = None
        self._symbolic = None
        self._dense = None

    def update(self, psi) -> "HFactorization":
        """Refill the values for new ``Psi`` matrices and refactor numerically."""
        psi = [getattr(p, "mat", p) for p in psi]
        self.values = self.pattern.values(psi)
        H = self.pattern.matrix(self.values)
        if self.backend == "cholmod":
            if self._symbolic is None:
                self._symbolic = _cholmod.analyze(H)
            try:
                self._symbolic.cholesky_inplace(H)
            except _cholmod.CholmodNotPositiveDefiniteError as exc:
                raise NotPositiveDefiniteError("H is not positive definite") from exc
            # the simplicial LDL' path factors indefinite matrices without complaint
            d = self._symbolic.D()
            if not np.all(d > 0.0):
                raise NotPositiveDefiniteError("H is not positive definite")
            self.logdet_H = float(np.sum(np.log(d)))
        else:
            try:
                self._dense = sla.cho_factor(H.toarray(), lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise NotPositiveDefiniteError("H is not positive definite") from exc
            self.logdet_H = float(2.0 * np.sum(np.log(np.diag(self._dense[0]))))
        return self

    def solve(self, b) -> np.ndarray:
        """``H^-1 b`` for a vector or a dense matrix of right-hand sides."""
        b = np.asarray(b, dtype=float)
        if self.backend == "cholmod":
            return np.asarray(self._symbolic(b))
        return sla.cho_solve(self._dense, b, check_finite=False)

    def matrix(self) -> sp.csc_matrix:
        return self.pattern.matrix(self.values)


def assemble_H(problem, theta, factorization: HFactorization | None = None, backend: str = "auto") -> HFactorization:
    """Factor ``H(theta)``, reusing ``factorization`` (pattern and symbolic analysis) when given."""
    if tuple(theta.dims) != tuple(problem.dims):
        raise ValueError(f"theta dims {theta.dims} do not match design {problem.dims}")
    if factorization is None:
        if problem.grouped.K == 0:
            factorization = HFactorization(_identity_pattern(problem.n), backend="dense")
        else:
            factorization = HFactorization(HPattern.for_design(problem.grouped), backend=backend)
    return factorization.update(theta.psi)


class _IdentityPattern(HPattern):
    def __init__(self, n):
        self.n = n
        self.dims = ()
        self.indices = np.arange(n, dtype=np.int32)
        self.indptr = np.arange(n + 1, dtype=np.int32)
        self.diag_pos = np.arange(n)
        self._scatter = []


def _identity_pattern(n):
    return _IdentityPattern(n)
