"""REML objective on the product manifold, its Riemannian gradient and Hessian.

The minimized objective is::

    L(theta) = (n - p) eta + log det H + log det(X^T H^-1 X) + y^T P(H) y / exp(eta)

with ``H = I + sum_j Z_j G_j Z_j^T`` and
``P(H) = H^-1 - H^-1 X (X^T H^-1 X)^-1 X^T H^-1``.

No ``n x n`` operator other than ``H`` itself is ever formed.  Everything the
derivatives need is reduced to ``H^-1 [X, y, Z]`` and to the dense
``q x q`` matrix ``Z^T P Z`` (``q = sum_j M_j q_j``), from which the per-level
``q_j x q_j`` blocks are folded.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .hmatrix import HFactorization, assemble_H
from .manifold import (
    ProductManifold,
    ThetaPoint,
    ThetaTangent,
    symmetrize,
)

SIGMA2_FLOOR = 1e-10


@dataclass
class ObjectiveWorkspace:
    """Quantities cached at one ``theta`` for reuse by gradient and Hessian.

    ``factorization`` may be refilled in place by a later :func:`evaluate`; the dense
    fields below never are, so a workspace stays valid for its own ``theta``.
    """

    theta: ThetaPoint
    value: float
    logdet_H: float
    logdet_A: float
    hinv_X: np.ndarray
    A_chol: tuple
    v2: np.ndarray
    v1: np.ndarray
    Py: np.ndarray
    ytPy: float
    hinv_Z: np.ndarray | None
    ZtPZ: np.ndarray | None
    Zt_Py: np.ndarray | None
    folded: tuple = ()
    factorization: HFactorization | None = None

    def check(self, theta):
        """Raise if this workspace was computed at a different point."""
        if theta is self.theta:
            return
        same = theta.eta == self.theta.eta and theta.dims == self.theta.dims and all(
            np.array_equal(a.mat, b.mat) for a, b in zip(theta.psi, self.theta.psi)
        )
        if not same:
            raise ValueError("workspace is stale: it was computed at a different theta")


def fold_levels(block: np.ndarray, n_levels: int, q: int) -> np.ndarray:
    """Sum of the ``n_levels`` diagonal ``q x q`` blocks of a square ``(n_levels*q)`` matrix."""
    b4 = block.reshape(n_levels, q, n_levels, q)
    idx = np.arange(n_levels)
    return b4[idx, :, idx, :].sum(axis=0)


def _factor_slices(grouped):
    off = grouped.offsets
    return [slice(off[j], off[j + 1]) for j in range(grouped.K)]


def evaluate(problem, theta: ThetaPoint, factorization: HFactorization | None = None, backend: str = "auto"):
    """Objective value at ``theta`` and the workspace holding every cached factor.

    ``factorization`` is refilled in place when given, so its symbolic analysis is
    reused across calls; the returned workspace does not depend on it afterwards.
    """
    X, y = problem.X, problem.y
    n, p = X.shape
    hf = assemble_H(problem, theta, factorization, backend=backend)
    grouped = problem.grouped
    if grouped.K:
        Z = grouped.Z
        rhs = np.hstack([X, y[:, None], Z.toarray()])
    else:
        rhs = np.hstack([X, y[:, None]])
    sol = hf.solve(rhs)
    hinv_X = sol[:, :p]
    v2 = sol[:, p]
    A = symmetrize(X.T @ hinv_X)
    try:
        A_chol = sla.cho_factor(A, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError("X^T H^-1 X is singular; X is rank deficient") from exc
    logdet_A = float(2.0 * np.sum(np.log(np.diag(A_chol[0]))))
    Xt_v2 = X.T @ v2
    coef = sla.cho_solve(A_chol, Xt_v2)
    v1 = X @ coef
    Py = v2 - hinv_X @ coef
    ytPy = float(y @ Py)
    if ytPy < -1e-8 * float(y @ y):
        raise ValueError(f"y^T P y = {ytPy} is negative; numerical breakdown")
    value = (n - p) * theta.eta + hf.logdet_H + logdet_A + ytPy * np.exp(-theta.eta)

    hinv_Z = ZtPZ = Zt_Py = None
    folded = ()
    if grouped.K:
        hinv_Z = sol[:, p + 1:]
        ZtX = hinv_Z.T @ X
        ZtPZ = symmetrize(Z.T @ hinv_Z - ZtX @ sla.cho_solve(A_chol, ZtX.T))
        Zt_Py = Z.T @ Py
        e = np.exp(-theta.eta)
        blocks = []
        for f, sl in zip(grouped.factors, _factor_slices(grouped)):
            u = Zt_Py[sl].reshape(f.n_levels, f.q)
            s = fold_levels(ZtPZ[sl, sl], f.n_levels, f.q) - e * (u.T @ u)
            blocks.append(symmetrize(s))
        folded = tuple(blocks)

    ws = ObjectiveWorkspace(
        theta=theta,
        value=float(value),
        logdet_H=hf.logdet_H,
        logdet_A=logdet_A,
        hinv_X=hinv_X,
        A_chol=A_chol,
        v2=v2,
        v1=v1,
        Py=Py,
        ytPy=ytPy,
        hinv_Z=hinv_Z,
        ZtPZ=ZtPZ,
        Zt_Py=Zt_Py,
        folded=folded,
        factorization=hf,
    )
    return float(value), ws


def euclidean_psi_gradient(ws: ObjectiveWorkspace) -> tuple:
    """Folded Euclidean gradients ``sum_l Z_{jl}^T (dL/dH) Z_{jl}``, one per factor."""
    return ws.folded


def riemannian_gradient(problem, theta: ThetaPoint, ws: ObjectiveWorkspace) -> ThetaTangent:
    ws.check(theta)
    n, p = problem.X.shape
    g_eta = (n - p) - ws.ytPy * np.exp(-theta.eta)
    g_psi = tuple(symmetrize(P.mat @ S @ P.mat) for P, S in zip(theta.psi, ws.folded))
    return ThetaTangent(g_eta, g_psi)


def riemannian_hess_vec(problem, theta: ThetaPoint, ws: ObjectiveWorkspace, xi: ThetaTangent) -> ThetaTangent:
    """Riemannian Hessian of the objective applied to ``xi``.

    The perturbation ``Delta = Z blockdiag(I_{M_r} (x) xi_r) Z^T`` of ``H`` is kept in
    factored form; ``Z_j^T P Delta P Z_j`` and ``Z_j^T P Delta P y`` reduce to products
    with the cached ``Z^T P Z`` and ``Z^T P y``.
    """
    ws.check(theta)
    if xi.dims != theta.dims:
        raise ValueError(f"tangent dims {xi.dims} do not match point dims {theta.dims}")
    e = np.exp(-theta.eta)
    grouped = problem.grouped
    if not grouped.K:
        return ThetaTangent(e * xi.xi_eta * ws.ytPy, ())

    B = sp.block_diag(
        [sp.kron(sp.identity(f.n_levels), x.mat) for f, x in zip(grouped.factors, xi.xi_psi)],
        format="csr",
    )
    C, u_all = ws.ZtPZ, ws.Zt_Py
    BC = B @ C
    w = B @ u_all
    Cw = C @ w
    zeta_eta = e * (xi.xi_eta * ws.ytPy + float(u_all @ w))

    zeta_psi = []
    for f, sl, P, S, x in zip(grouped.factors, _factor_slices(grouped), theta.psi, ws.folded, xi.xi_psi):
        m, q = f.n_levels, f.q
        t_jj = C[sl, :] @ BC[:, sl]
        u = u_all[sl].reshape(m, q)
        a = Cw[sl].reshape(m, q)
        cross = a.T @ u
        dS = -fold_levels(t_jj, m, q) + e * (cross + cross.T) + xi.xi_eta * e * (u.T @ u)
        dS = symmetrize(dS)
        corr = x.mat @ S @ P.mat
        zeta_psi.append(symmetrize(P.mat @ dS @ P.mat + 0.5 * (corr + corr.T)))
    return ThetaTangent(zeta_eta, tuple(zeta_psi))


def gls_beta(problem, ws: ObjectiveWorkspace) -> np.ndarray:
    """Generalized least-squares estimate ``(X^T H^-1 X)^-1 X^T H^-1 y``."""
    return sla.cho_solve(ws.A_chol, problem.X.T @ ws.v2)


def init_theta(problem) -> ThetaPoint:
    """``Psi_j = I`` and ``eta = log`` of the OLS residual variance ``RSS / n`` (floored at 1e-10)."""
    X, y = problem.X, problem.y
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    rss = float(np.sum((y - X @ beta) ** 2))
    sigma2 = max(rss / problem.n, SIGMA2_FLOOR)
    return ThetaPoint(np.log(sigma2), tuple(np.eye(q) for q in problem.dims))


class LmmObjective:
    """Adapter exposing the REML objective to the solvers.

    Keeps one :class:`HFactorization` whose pattern and symbolic analysis are reused
    by every evaluation, and caches the workspaces of the two most recent points
    (a trust-region step needs the current point while it evaluates a candidate).
    """

    def __init__(self, problem, backend: str = "auto", transport_mode: str = "identity"):
        self.problem = problem
        self.backend = backend
        self.manifold = ProductManifold(problem.dims, transport_mode=transport_mode)
        self._hfact = None
        self._cache = []
        self.n_evaluations = 0

    def workspace(self, theta) -> ObjectiveWorkspace:
        for t, ws in self._cache:
            if t is theta:
                return ws
        _, ws = evaluate(self.problem, theta, self._hfact, backend=self.backend)
        self._hfact = ws.factorization
        self.n_evaluations += 1
        self._cache = [(theta, ws)] + self._cache[:1]
        return ws

    def cost(self, theta) -> float:
        return self.workspace(theta).value

    def gradient(self, theta) -> ThetaTangent:
        return riemannian_gradient(self.problem, theta, self.workspace(theta))

    def hess(self, theta, xi) -> ThetaTangent:
        return riemannian_hess_vec(self.problem, theta, self.workspace(theta), xi)
