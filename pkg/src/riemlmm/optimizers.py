"""Riemannian Newton trust-region and nonlinear conjugate-gradient solvers.

Both solvers take a *problem* exposing ``cost(x)``, ``gradient(x)``, ``hess(x, v)``
(the Hessian only for the trust-region method) and a ``manifold`` attribute
providing ``inner``, ``norm``, ``retract``, ``transport`` and ``dim``.  Tangent
vectors only need ``+``, ``-`` and scalar ``*``.
"""
from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .manifold import NotPositiveDefiniteError

log = logging.getLogger(__name__)


class Termination(str, enum.Enum):
    MAX_ITERS = "MaxIters"
    REL_OBJ_TOL = "RelObjTol"
    STEP_LEN_TOL = "StepLenTol"
    GRAD_NORM_TOL = "GradNormTol"


@dataclass(frozen=True)
class TrustRegionConfig:
    delta0: float = 1.0
    delta_max: float | None = None  # defaults to 16 * delta0
    rho_prime: float = 0.1
    omega1: float = 1e-3
    omega2: float = 0.99
    alpha1: float = 0.25
    alpha2: float = 3.5
    tcg_max_inner: int | None = None  # defaults to the manifold dimension
    tcg_kappa: float = 0.1
    tcg_theta: float = 1.0

    def __post_init__(self):
        if self.delta_max is None:
            object.__setattr__(self, "delta_max", 16.0 * self.delta0)
        if not 0.0 <= self.rho_prime < 0.25:
            raise ValueError("rho_prime must lie in [0, 1/4)")
        if not 0.0 <= self.omega1 < self.omega2 <= 1.0:
            raise ValueError("need 0 <= omega1 < omega2 <= 1")
        if not self.alpha1 < 1.0 < self.alpha2:
            raise ValueError("need alpha1 < 1 < alpha2")
        if not 0.0 < self.delta0 <= self.delta_max:
            raise ValueError("need 0 < delta0 <= delta_max")


@dataclass(frozen=True)
class StoppingConfig:
    max_iters: int = 1000
    rel_obj_tol: float = 1e-5
    step_len_tol: float = 1e-7
    grad_norm_tol: float = 1e-3

    def __post_init__(self):
        if min(self.max_iters, self.rel_obj_tol, self.step_len_tol, self.grad_norm_tol) <= 0:
            raise ValueError("stopping thresholds must be positive")


@dataclass(frozen=True)
class LineSearchConfig:
    """Armijo backtracking for R-CG."""

    c1: float = 1e-4
    backtrack: float = 0.5
    max_trials: int = 25
    max_step_norm: float = 1.0
    beta_rule: str = "PR+"

    def __post_init__(self):
        if self.beta_rule not in ("PR+", "FR", "HS"):
            raise ValueError(f"unknown beta rule {self.beta_rule!r}")


@dataclass
class RunResult:
    theta_final: Any
    objective_trace: list = field(default_factory=list)
    grad_norm_trace: list = field(default_factory=list)
    iters: int = 0
    inner_iters_trace: list = field(default_factory=list)
    termination: Termination | None = None
    wall_time_seconds: float = 0.0
    iterate_trace: list | None = None

    @property
    def final_objective(self) -> float:
        return self.objective_trace[-1]


def check_stopping(prev_obj, cur_obj, step_norm, grad_norm, iter, stop_cfg: StoppingConfig, step_accepted: bool = True):
    """Return the firing termination criterion, or ``None``.

    Priority when several fire: gradient norm, relative objective change, step
    length, iteration cap.  The relative-objective test ignores rejected steps.
    """
    if grad_norm is not None and grad_norm < stop_cfg.grad_norm_tol:
        return Termination.GRAD_NORM_TOL
    if step_accepted and prev_obj is not None and cur_obj is not None:
        if abs(prev_obj - cur_obj) / max(abs(prev_obj), 1e-12) < stop_cfg.rel_obj_tol:
            return Termination.REL_OBJ_TOL
    if step_norm is not None and step_norm < stop_cfg.step_len_tol:
        return Termination.STEP_LEN_TOL
    if iter >= stop_cfg.max_iters:
        return Termination.MAX_ITERS
    return None


def _boundary_tau(inner, s, d, delta):
    """Positive root of ``||s + tau d|| = delta``."""
    ss, sd, dd = inner(s, s), inner(s, d), inner(d, d)
    disc = max(sd * sd + dd * (delta * delta - ss), 0.0)
    return (-sd + math.sqrt(disc)) / dd


def tcg_subsolve(grad, hess_operator: Callable, delta: float, inner: Callable, max_inner: int, kappa: float = 0.1, theta: float = 1.0):
    """Steihaug-Toint truncated CG for ``min <g,s> + 1/2 <H s, s>`` s.t. ``||s|| <= delta``.

    Returns ``(s, n_inner, boundary_hit)``.  Stops at negative curvature or at the
    boundary (both ending on the sphere), on the residual rule
    ``||r_k|| <= ||r_0|| min(kappa, ||r_0||^theta)``, or after ``max_inner`` steps.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    s = grad * 0.0
    r = grad
    rr = inner(r, r)
    r0 = math.sqrt(rr)
    if r0 == 0.0:
        return s, 0, False
    target = r0 * min(kappa, r0 ** theta)
    d = -r
    for k in range(max_inner):
        Hd = hess_operator(d)
        dHd = inner(d, Hd)
        if not dHd > 0.0:
            tau = _boundary_tau(inner, s, d, delta)
            return s + tau * d, k + 1, True
        alpha = rr / dHd
        s_next = s + alpha * d
        if inner(s_next, s_next) >= delta * delta:
            tau = _boundary_tau(inner, s, d, delta)
            return s + tau * d, k + 1, True
        s = s_next
        r = r + alpha * Hd
        rr_next = inner(r, r)
        if math.sqrt(rr_next) <= target:
            return s, k + 1, False
        d = -r + (rr_next / rr) * d
        rr = rr_next
    return s, max_inner, False


def _safe_cost(problem, x):
    try:
        f = problem.cost(x)
    except (NotPositiveDefiniteError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.debug("cost evaluation failed at candidate: %s", exc)
        return math.nan
    return f if math.isfinite(f) else math.nan


def _safe_retract(manifold, x, v):
    try:
        return manifold.retract(x, v)
    except (NotPositiveDefiniteError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.debug("retraction failed: %s", exc)
        return None


def update_radius(rho, delta, s_norm, on_boundary, cfg: TrustRegionConfig) -> float:
    """Next trust-region radius given the ratio ``rho`` of actual to predicted decrease.

    Shrinks by ``alpha1`` when ``rho < omega1`` and also on every rejected step
    (``rho <= rho_prime``): with ``omega1 <= rho <= rho_prime`` an unchanged
    radius would reproduce the same rejected step forever.  Grows to
    ``min(alpha2 delta, delta_max)`` when ``rho > omega2`` and the step reached
    the boundary.
    """
    if rho < cfg.omega1 or not rho > cfg.rho_prime:
        return cfg.alpha1 * delta
    if rho > cfg.omega2 and (on_boundary or abs(s_norm - delta) <= 1e-10 * delta):
        return min(cfg.alpha2 * delta, cfg.delta_max)
    return delta


def rntr_solve(problem, theta0, tr_cfg: TrustRegionConfig | None = None, stop_cfg: StoppingConfig | None = None,
               keep_iterates: bool = False, hess: Callable | None = None) -> RunResult:
    """Riemannian Newton trust-region method with a tCG inner solver.

    ``hess(x, v)`` overrides ``problem.hess``; passing ``lambda x, v: v`` gives a
    trust-region gradient method.
    """
    tr_cfg = tr_cfg or TrustRegionConfig()
    stop_cfg = stop_cfg or StoppingConfig()
    M = problem.manifold
    hess = hess or problem.hess
    max_inner = tr_cfg.tcg_max_inner or M.dim

    t_start = time.perf_counter()
    x = theta0
    f = problem.cost(x)
    if not math.isfinite(f):
        raise ValueError("objective is not finite at the initial point")
    g = problem.gradient(x)
    gnorm = M.norm(x, g)
    res = RunResult(theta_final=x, objective_trace=[f], grad_norm_trace=[gnorm],
                    iterate_trace=[x] if keep_iterates else None)
    delta = tr_cfg.delta0

    reason = check_stopping(None, None, None, gnorm, 0, stop_cfg)
    it = 0
    while reason is None:
        inner = lambda a, b, _x=x: M.inner(_x, a, b)
        s, n_inner, on_boundary = tcg_subsolve(g, lambda v, _x=x: hess(_x, v), delta, inner, max_inner,
                                     tr_cfg.tcg_kappa, tr_cfg.tcg_theta)
        s_norm = M.norm(x, s)
        model_dec = -(inner(g, s) + 0.5 * inner(hess(x, s), s))

        x_new = _safe_retract(M, x, s)
        f_new = _safe_cost(problem, x_new) if x_new is not None else math.nan
        if not model_dec > 1e-14 * abs(f) or math.isnan(f_new):
            rho = -math.inf
        else:
            rho = (f - f_new) / model_dec

        accepted = rho > tr_cfg.rho_prime
        delta = update_radius(rho, delta, s_norm, on_boundary, tr_cfg)

        f_prev = f
        if accepted:
            x, f = x_new, f_new
            g = problem.gradient(x)
            gnorm = M.norm(x, g)
        it += 1
        res.objective_trace.append(f)
        res.grad_norm_trace.append(gnorm)
        res.inner_iters_trace.append(n_inner)
        if keep_iterates:
            res.iterate_trace.append(x)
        log.debug("rntr it=%d f=%.10g |g|=%.3e rho=%.3g delta=%.3g inner=%d %s",
                  it, f, gnorm, rho, delta, n_inner, "acc" if accepted else "rej")
        reason = check_stopping(f_prev, f, s_norm, gnorm, it, stop_cfg, step_accepted=accepted)

    res.theta_final = x
    res.iters = it
    res.termination = reason
    res.wall_time_seconds = time.perf_counter() - t_start
    return res


def _beta(rule, x_new, g_new, g_old_t, d_old_t, inner_new, gg_old):
    if rule == "FR":
        return inner_new(g_new, g_new) / gg_old
    y = g_new - g_old_t
    if rule == "HS":
        den = inner_new(d_old_t, y)
        return 0.0 if den == 0.0 else max(0.0, inner_new(g_new, y) / den)
    return max(0.0, inner_new(g_new, y) / gg_old)


def _armijo_search(problem, M, x, f, d, slope, alpha, alpha_max, cfg: LineSearchConfig):
    """Backtracking search along ``R_x(alpha d)`` returning ``(alpha, x_new, f_new)``.

    The first trial is refined once by the minimizer of the quadratic through
    ``f(0)``, the slope and ``f(alpha)``; the lower of the two points is the start
    of ordinary Armijo backtracking.  ``x_new`` is ``None`` on failure.
    """
    trials = 0

    def trial(a):
        nonlocal trials
        trials += 1
        cand = _safe_retract(M, x, a * d)
        return (cand, _safe_cost(problem, cand)) if cand is not None else (None, math.nan)

    cand, fc = trial(alpha)
    if math.isfinite(fc):
        curv = (fc - f - slope * alpha) / (alpha * alpha)
        if curv > 0.0:
            a_q = min(-slope / (2.0 * curv), alpha_max)
            if a_q != alpha and trials < cfg.max_trials:
                cand_q, fq = trial(a_q)
                if math.isfinite(fq) and fq < fc:
                    alpha, cand, fc = a_q, cand_q, fq
    while True:
        if cand is not None and fc <= f + cfg.c1 * alpha * slope:
            return alpha, cand, fc
        if trials >= cfg.max_trials:
            return alpha, None, math.nan
        alpha *= cfg.backtrack
        cand, fc = trial(alpha)


def rcg_solve(problem, theta0, stop_cfg: StoppingConfig | None = None, ls_cfg: LineSearchConfig | None = None,
              keep_iterates: bool = False) -> RunResult:
    """Riemannian nonlinear CG with Armijo backtracking and identity-style transport.

    The first direction is steepest descent; non-descent directions are reset to
    ``-grad``.  A failed line search restarts from steepest descent; a second
    consecutive failure stops with ``StepLenTol``.
    """
    stop_cfg = stop_cfg or StoppingConfig()
    ls_cfg = ls_cfg or LineSearchConfig()
    M = problem.manifold

    t_start = time.perf_counter()
    x = theta0
    f = problem.cost(x)
    if not math.isfinite(f):
        raise ValueError("objective is not finite at the initial point")
    g = problem.gradient(x)
    gnorm = M.norm(x, g)
    res = RunResult(theta_final=x, objective_trace=[f], grad_norm_trace=[gnorm],
                    iterate_trace=[x] if keep_iterates else None)
    d = -g
    alpha_prev = None
    reason = check_stopping(None, None, None, gnorm, 0, stop_cfg)
    it = 0
    failures = 0
    while reason is None:
        slope = M.inner(x, g, d)
        if not slope < 0.0:
            d = -g
            slope = -gnorm * gnorm
        d_norm = M.norm(x, d)
        # Barzilai-Borwein-like guess from the previous accepted step, capped in length
        alpha = alpha_prev if alpha_prev is not None else 1.0 / max(gnorm, 1e-300)
        alpha = min(alpha, ls_cfg.max_step_norm / d_norm)

        alpha, x_new, f_new = _armijo_search(problem, M, x, f, d, slope, alpha, ls_cfg.max_step_norm / d_norm, ls_cfg)

        it += 1
        if x_new is None:
            failures += 1
            res.objective_trace.append(f)
            res.grad_norm_trace.append(gnorm)
            if keep_iterates:
                res.iterate_trace.append(x)
            if failures >= 2:
                reason = Termination.STEP_LEN_TOL
                break
            d = -g
            alpha_prev = None
            reason = check_stopping(None, None, None, gnorm, it, stop_cfg)
            continue
        failures = 0

        step = alpha * d
        step_norm = alpha * d_norm
        g_new = problem.gradient(x_new)
        gnorm_new = M.norm(x_new, g_new)
        g_old_t = M.transport(x, step, g)
        d_old_t = M.transport(x, step, d)
        inner_new = lambda a, b, _x=x_new: M.inner(_x, a, b)
        beta = _beta(ls_cfg.beta_rule, x_new, g_new, g_old_t, d_old_t, inner_new, gnorm * gnorm)
        d_new = -g_new + beta * d_old_t
        if not inner_new(g_new, d_new) < 0.0:
            d_new = -g_new

        # next initial step: BB ratio <s, s> / <s, yk> when positive
        yk = g_new - g_old_t
        step_t = M.transport(x, step, step)
        sy = inner_new(step_t, yk)
        alpha_prev = None
        if sy > 0.0:
            bb = inner_new(step_t, step_t) / sy
            alpha_prev = bb * M.norm(x_new, -g_new) / max(M.norm(x_new, d_new), 1e-300)

        f_prev = f
        x, f, g, gnorm, d = x_new, f_new, g_new, gnorm_new, d_new
        res.objective_trace.append(f)
        res.grad_norm_trace.append(gnorm)
        if keep_iterates:
            res.iterate_trace.append(x)
        log.debug("rcg it=%d f=%.10g |g|=%.3e alpha=%.3g beta=%.3g", it, f, gnorm, alpha, beta)
        reason = check_stopping(f_prev, f, step_norm, gnorm, it, stop_cfg)

    res.theta_final = x
    res.iters = it
    res.termination = reason
    res.wall_time_seconds = time.perf_counter() - t_start
    return res
