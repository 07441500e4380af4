"""Geometry of the SPD cone and of the product manifold R x P^{q_1} x ... x P^{q_K}.

Points on P^d carry the affine-invariant metric ``<xi, chi>_S = tr(xi S^-1 chi S^-1)``
and are moved with the exponential-map retraction ``S exp(S^-1 xi)``.  The product
manifold used for variance estimation pairs a log residual variance ``eta`` with one
SPD block per grouping factor.

All values are immutable; every operation is a pure function.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.linalg as sla


class NotPositiveDefiniteError(ValueError):
    """Raised when a matrix expected to be SPD fails its Cholesky factorization."""


def symmetrize(a):
    return 0.5 * (a + a.T)


def _eigh_sym(a):
    w, v = np.linalg.eigh(symmetrize(a))
    return w, v


def _fun_sym(w, v, f):
    """Apply ``f`` to a symmetric matrix given its eigendecomposition ``v diag(w) v^T``."""
    return symmetrize((v * f(w)) @ v.T)


@dataclass(frozen=True, eq=False)
class SymTangent:
    """Symmetric matrix, a tangent vector of P^d.  Symmetrized on construction."""

    mat: np.ndarray

    def __post_init__(self):
        m = np.array(self.mat, dtype=float, copy=True)
        if m.ndim == 0:
            m = m.reshape(1, 1)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
            raise ValueError(f"tangent must be a non-empty square matrix, got shape {m.shape}")
        m = symmetrize(m)
        m.setflags(write=False)
        object.__setattr__(self, "mat", m)

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    def __add__(self, other):
        return SymTangent(self.mat + _as_sym(other, self.dim).mat)

    def __sub__(self, other):
        return SymTangent(self.mat - _as_sym(other, self.dim).mat)

    def __neg__(self):
        return SymTangent(-self.mat)

    def __mul__(self, c):
        return SymTangent(float(c) * self.mat)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return SymTangent(self.mat / float(c))

    def __repr__(self):
        return f"SymTangent({self.mat.tolist()!r})"


@dataclass(frozen=True, eq=False)
class SpdPoint:
    """Symmetric positive definite matrix, a point of P^d.

    Validated on construction by a Cholesky factorization; raises
    :class:`NotPositiveDefiniteError` otherwise.
    """

    mat: np.ndarray

    def __post_init__(self):
        m = np.array(self.mat, dtype=float, copy=True)
        if m.ndim == 0:
            m = m.reshape(1, 1)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
            raise ValueError(f"SPD point must be a non-empty square matrix, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise NotPositiveDefiniteError("SPD point has non-finite entries")
        m = symmetrize(m)
        try:
            c = np.linalg.cholesky(m)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError("matrix is not positive definite") from exc
        m.setflags(write=False)
        object.__setattr__(self, "mat", m)
        object.__setattr__(self, "_chol", c)

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    @property
    def chol(self) -> np.ndarray:
        """Lower Cholesky factor."""
        return self._chol

    @cached_property
    def _eig(self):
        return _eigh_sym(self.mat)

    @cached_property
    def sqrt(self) -> np.ndarray:
        w, v = self._eig
        return _fun_sym(w, v, np.sqrt)

    @cached_property
    def invsqrt(self) -> np.ndarray:
        w, v = self._eig
        return _fun_sym(w, v, lambda x: 1.0 / np.sqrt(x))

    @cached_property
    def inv(self) -> np.ndarray:
        return symmetrize(sla.cho_solve((self._chol, True), np.eye(self.dim)))

    def solve(self, b):
        """``S^-1 b``."""
        return sla.cho_solve((self._chol, True), b)

    def whiten(self, xi):
        """``L^-1 xi L^-T`` with ``L`` the Cholesky factor; a congruence used by the metric."""
        t = sla.solve_triangular(self._chol, xi, lower=True)
        return sla.solve_triangular(self._chol, t.T, lower=True).T

    def __repr__(self):
        return f"SpdPoint({self.mat.tolist()!r})"


def _as_spd(x) -> SpdPoint:
    return x if isinstance(x, SpdPoint) else SpdPoint(x)


def _as_sym(x, dim=None) -> SymTangent:
    t = x if isinstance(x, SymTangent) else SymTangent(x)
    if dim is not None and t.dim != dim:
        raise ValueError(f"dimension mismatch: expected {dim}, got {t.dim}")
    return t


def _check_dims(*dims):
    if len(set(dims)) != 1:
        raise ValueError(f"dimension mismatch: {dims}")


# --- P^d -------------------------------------------------------------------------


def spd_inner(sigma, xi, chi) -> float:
    """Affine-invariant inner product ``tr(xi S^-1 chi S^-1)``."""
    sigma = _as_spd(sigma)
    xi, chi = _as_sym(xi), _as_sym(chi)
    _check_dims(sigma.dim, xi.dim, chi.dim)
    a = sigma.whiten(xi.mat)
    b = a if chi is xi else sigma.whiten(chi.mat)
    return float(np.sum(a * b))


def spd_retract(sigma, xi) -> SpdPoint:
    """Exponential map ``S exp(S^-1 xi)``, evaluated as ``S^1/2 exp(S^-1/2 xi S^-1/2) S^1/2``."""
    sigma = _as_spd(sigma)
    xi = _as_sym(xi, sigma.dim)
    if not np.any(xi.mat):
        return sigma  # exact rigidity; the eigen round trip would perturb the last bits
    arg = sigma.invsqrt @ xi.mat @ sigma.invsqrt
    if not np.all(np.isfinite(arg)):
        raise ValueError("non-finite argument to the matrix exponential")
    w, v = _eigh_sym(arg)
    e = _fun_sym(w, v, np.exp)
    out = sigma.sqrt @ e @ sigma.sqrt
    if not np.all(np.isfinite(out)):
        raise ValueError("retraction overflowed")
    return SpdPoint(out)


def spd_transport(sigma, eta, xi, mode: str = "identity") -> SymTangent:
    """Transport ``xi`` from ``T_S`` to ``T_{R_S(eta)}``.

    ``mode="full"`` uses ``S^1/2 E S^-1/2 xi S^-1/2 E S^1/2`` with
    ``E = exp(S^-1/2 eta S^-1/2 / 2)``; ``mode="identity"`` returns ``xi``.
    """
    sigma = _as_spd(sigma)
    eta = _as_sym(eta, sigma.dim)
    xi = _as_sym(xi, sigma.dim)
    if mode == "identity":
        return xi
    if mode != "full":
        raise ValueError(f"unknown transport mode {mode!r}")
    w, v = _eigh_sym(0.5 * sigma.invsqrt @ eta.mat @ sigma.invsqrt)
    e = _fun_sym(w, v, np.exp)
    m = sigma.sqrt @ e @ sigma.invsqrt
    out = m @ xi.mat @ m.T
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite transported vector")
    return SymTangent(out)


def spd_egrad_to_rgrad(sigma, egrad) -> SymTangent:
    """Riemannian gradient ``S sym(egrad) S`` from a (not necessarily symmetric) Euclidean one."""
    sigma = _as_spd(sigma)
    g = np.asarray(egrad, dtype=float)
    if g.ndim == 0:
        g = g.reshape(1, 1)
    if g.shape != (sigma.dim, sigma.dim):
        raise ValueError(f"dimension mismatch: {g.shape} vs {sigma.dim}")
    return SymTangent(sigma.mat @ symmetrize(g) @ sigma.mat)


def spd_rhess(sigma, rgrad, dgrad, xi) -> SymTangent:
    """Riemannian Hessian from ``dgrad = D(grad f)(S)[xi]`` via the Levi-Civita correction."""
    sigma = _as_spd(sigma)
    g = _as_sym(rgrad, sigma.dim)
    dg = _as_sym(dgrad, sigma.dim)
    xi = _as_sym(xi, sigma.dim)
    t = xi.mat @ sigma.solve(g.mat)
    return SymTangent(dg.mat - 0.5 * (t + t.T))


# --- product manifold ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ThetaTangent:
    """Tangent vector ``(xi_eta, xi_psi_1, ..., xi_psi_K)`` of the product manifold."""

    xi_eta: float
    xi_psi: tuple

    def __post_init__(self):
        object.__setattr__(self, "xi_eta", float(self.xi_eta))
        object.__setattr__(self, "xi_psi", tuple(_as_sym(x) for x in self.xi_psi))

    @property
    def dims(self) -> tuple:
        return tuple(x.dim for x in self.xi_psi)

    def _check(self, other):
        if not isinstance(other, ThetaTangent) or other.dims != self.dims:
            raise ValueError("tangent shape mismatch")

    def __add__(self, other):
        self._check(other)
        return ThetaTangent(self.xi_eta + other.xi_eta, tuple(a + b for a, b in zip(self.xi_psi, other.xi_psi)))

    def __sub__(self, other):
        self._check(other)
        return ThetaTangent(self.xi_eta - other.xi_eta, tuple(a - b for a, b in zip(self.xi_psi, other.xi_psi)))

    def __neg__(self):
        return ThetaTangent(-self.xi_eta, tuple(-a for a in self.xi_psi))

    def __mul__(self, c):
        c = float(c)
        return ThetaTangent(c * self.xi_eta, tuple(c * a for a in self.xi_psi))

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self * (1.0 / float(c))

    def to_vector(self) -> np.ndarray:
        """Flatten to ``[xi_eta, vec(xi_psi_1), ...]``; only for diagnostics and tests."""
        return np.concatenate([[self.xi_eta]] + [x.mat.ravel() for x in self.xi_psi])

    def __repr__(self):
        return f"ThetaTangent(xi_eta={self.xi_eta!r}, xi_psi={list(self.xi_psi)!r})"


@dataclass(frozen=True, eq=False)
class ThetaPoint:
    """Point ``(eta, Psi_1, ..., Psi_K)``; ``eta`` is the log residual variance."""

    eta: float
    psi: tuple

    def __post_init__(self):
        eta = float(self.eta)
        with np.errstate(over="ignore", under="ignore"):
            var = np.exp(eta)
        if not np.isfinite(eta) or not np.isfinite(var) or var <= 0.0:
            raise ValueError(f"eta={eta!r} does not give a finite positive variance")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "psi", tuple(_as_spd(p) for p in self.psi))

    @property
    def dims(self) -> tuple:
        return tuple(p.dim for p in self.psi)

    @property
    def sigma2(self) -> float:
        return float(np.exp(self.eta))

    def __repr__(self):
        return f"ThetaPoint(eta={self.eta!r}, psi={list(self.psi)!r})"


def _check_shapes(theta: ThetaPoint, *tangents: ThetaTangent):
    for t in tangents:
        if t.dims != theta.dims:
            raise ValueError(f"tangent dims {t.dims} do not match point dims {theta.dims}")


def product_inner(theta: ThetaPoint, xi: ThetaTangent, chi: ThetaTangent) -> float:
    """Sum of the Euclidean product on the eta part and the affine-invariant metrics."""
    _check_shapes(theta, xi, chi)
    s = xi.xi_eta * chi.xi_eta
    for p, a, b in zip(theta.psi, xi.xi_psi, chi.xi_psi):
        s += spd_inner(p, a, b)
    return float(s)


def product_norm(theta: ThetaPoint, xi: ThetaTangent) -> float:
    return float(np.sqrt(max(product_inner(theta, xi, xi), 0.0)))


def product_retract(theta: ThetaPoint, xi: ThetaTangent) -> ThetaPoint:
    _check_shapes(theta, xi)
    return ThetaPoint(theta.eta + xi.xi_eta, tuple(spd_retract(p, x) for p, x in zip(theta.psi, xi.xi_psi)))


def product_transport(theta: ThetaPoint, eta: ThetaTangent, xi: ThetaTangent, mode: str = "identity") -> ThetaTangent:
    _check_shapes(theta, eta, xi)
    if mode == "identity":
        return xi
    return ThetaTangent(
        xi.xi_eta,
        tuple(spd_transport(p, e, x, mode=mode) for p, e, x in zip(theta.psi, eta.xi_psi, xi.xi_psi)),
    )


class ProductManifold:
    """The manifold R x P^{q_1} x ... x P^{q_K} with fixed block sizes.

    Bundles the product operations behind the small interface the solvers use
    (``inner``, ``norm``, ``retract``, ``transport``, ``zero_vector``, ``dim``).
    """

    def __init__(self, dims: Sequence[int], transport_mode: str = "identity"):
        dims = tuple(int(d) for d in dims)
        if any(d <= 0 for d in dims):
            raise ValueError("block dimensions must be positive")
        if transport_mode not in ("identity", "full"):
            raise ValueError(f"unknown transport mode {transport_mode!r}")
        self.dims = dims
        self.transport_mode = transport_mode

    @property
    def dim(self) -> int:
        return 1 + sum(d * (d + 1) // 2 for d in self.dims)

    def inner(self, theta, xi, chi):
        return product_inner(theta, xi, chi)

    def norm(self, theta, xi):
        return product_norm(theta, xi)

    def retract(self, theta, xi):
        return product_retract(theta, xi)

    def transport(self, theta, eta, xi):
        return product_transport(theta, eta, xi, mode=self.transport_mode)

    def zero_vector(self, theta=None):
        return ThetaTangent(0.0, tuple(np.zeros((d, d)) for d in self.dims))

    def identity_point(self, eta=0.0):
        return ThetaPoint(eta, tuple(np.eye(d) for d in self.dims))

    def random_point(self, rng, eta_scale=1.0):
        psi = []
        for d in self.dims:
            a = rng.standard_normal((d, d))
            psi.append(a @ a.T / d + 0.5 * np.eye(d))
        return ThetaPoint(eta_scale * rng.standard_normal(), tuple(psi))

    def random_tangent(self, rng, theta=None):
        return ThetaTangent(rng.standard_normal(), tuple(symmetrize(rng.standard_normal((d, d))) for d in self.dims))
