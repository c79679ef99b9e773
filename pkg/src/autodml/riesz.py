"""Minimum-distance Lasso and Dantzig learners of the Riesz representer.

Both learners fit ``alpha(x) = b(x)' rho`` from the moment vector
``M = mean m(W, b)`` and Gram matrix ``G = mean b b'``. The Lasso solves

    min_rho  rho' G rho - 2 rho' M + 2 r_L sum_j t_j |D_j rho_j|

where ``t_1 = c3`` for the leading (intercept) term and ``t_j = 1``
otherwise, with the regularization level ``r_L`` and normalization ``D``
tuned by :func:`fit_lasso_md`. The Dantzig learner solves
``min |rho|_1  s.t.  |M - G rho|_inf <= lambda_D`` as a linear program.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy.special import ndtri
from sklearn.base import BaseEstimator
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .lp import LPError, simplex

__all__ = [
    "LassoMDConfig",
    "DantzigConfig",
    "RieszFit",
    "CDResult",
    "theoretical_r_L",
    "soft_threshold_update",
    "coordinate_descent",
    "kkt_residual",
    "fit_lasso_md",
    "fit_dantzig_md",
    "LassoMDRiesz",
    "DantzigMDRiesz",
]


@dataclass(frozen=True)
class LassoMDConfig:
    """Tuning constants for :func:`fit_lasso_md`.

    ``normalize=False`` and ``warm_start=False`` switch off the data-driven
    ``D`` and warm starts; together with ``fixed_r_L`` they reproduce the
    simpler variants the full tuner is built from.
    """

    c1: float = 1.0
    c2: float = 0.1
    c3: float = 0.1
    low_dim_fraction: float = 1.0 / 40.0
    max_outer_iters: int = 10
    ridge_shift: float = 0.2
    tol: float = 1e-8
    outer_tol: float = 1e-6
    max_sweeps: int = 100_000
    fixed_r_L: float | None = None
    r_L_multiplier: float = 1.0
    normalize: bool = True
    warm_start: bool = True
    d_floor: float = 1e-12

    def __post_init__(self):
        if not self.c1 > 0:
            raise ValueError("c1 must be positive")
        if not 0 < self.c2 < 1:
            raise ValueError("c2 must lie in (0, 1)")
        if not self.c3 > 0:
            raise ValueError("c3 must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not 0 < self.low_dim_fraction <= 1:
            raise ValueError("low_dim_fraction must lie in (0, 1]")
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be >= 1")
        if self.fixed_r_L is not None and self.fixed_r_L < 0:
            raise ValueError("fixed_r_L must be non-negative")


@dataclass(frozen=True)
class DantzigConfig:
    lambda_d: float
    tol: float = 1e-9
    warm_start: bool = True

    def __post_init__(self):
        if not self.lambda_d > 0:
            raise ValueError("lambda_d must be positive")


@dataclass
class RieszFit:
    """Coefficients over the dictionary plus tuning diagnostics."""

    coef: np.ndarray
    r_L: float
    D: np.ndarray
    outer_iters: int
    kkt_residual: float
    learner: str
    c3: float = 1.0
    converged: bool = True
    flags: list[str] = field(default_factory=list)
    outer_changes: list[float] = field(default_factory=list)

    @property
    def thresholds(self) -> np.ndarray:
        """Effective per-term thresholds ``r_L * D_j`` (times ``c3`` for term 1)."""
        return _thresholds(self.r_L, self.D, self.c3)

    def predict(self, B) -> np.ndarray:
        return np.asarray(B) @ self.coef

    def at(self, dictionary, data, rows=None, override=None):
        return dictionary.at(data, rows, override) @ self.coef


@dataclass
class CDResult:
    coef: np.ndarray
    sweeps: int
    converged: bool
    kkt_residual: float
    objective: np.ndarray | None = None


def theoretical_r_L(n_used: int, p: int, c1: float = 1.0, c2: float = 0.1) -> float:
    """``c1 / sqrt(n) * Phi^{-1}(1 - c2 / (2p))``."""
    if n_used <= 0:
        raise ValueError("n_used must be positive")
    if p < 1:
        raise ValueError("p must be >= 1")
    if not 0 < c2 < 2 * p:
        raise ValueError("need 0 < c2 < 2p")
    if not c1 > 0:
        raise ValueError("c1 must be positive")
    return c1 / math.sqrt(n_used) * float(ndtri(1.0 - c2 / (2.0 * p)))


def soft_threshold_update(pi: float, z: float, threshold: float) -> float:
    """Exact minimizer over one coordinate given its loadings ``(pi, z)``."""
    if not z > 0:
        raise ValueError("degenerate diagonal")
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    if pi < -threshold:
        return (pi + threshold) / z
    if pi > threshold:
        return (pi - threshold) / z
    return 0.0


def _thresholds(r_L, D, c3):
    thr = r_L * np.asarray(D, dtype=float)
    thr = thr.copy()
    thr[0] *= c3
    return thr


@numba.njit(cache=True)
def _objective(G, M, thr, rho):
    return rho @ (G @ rho) - 2.0 * rho @ M + 2.0 * np.sum(thr * np.abs(rho))


@numba.njit(cache=True)
def _cd_sweeps(G, M, thr, rho, tol, max_sweeps, trace):
    p = M.shape[0]
    grad = M - G @ rho  # M - G rho, kept current across updates
    for j in range(p):
        if G[j, j] <= 0.0 and rho[j] != 0.0:
            grad += G[:, j] * rho[j]
            rho[j] = 0.0
    for s in range(max_sweeps):
        biggest = 0.0
        for j in range(p):
            z = G[j, j]
            if z <= 0.0:
                continue
            pi = grad[j] + z * rho[j]
            t = thr[j]
            if pi < -t:
                new = (pi + t) / z
            elif pi > t:
                new = (pi - t) / z
            else:
                new = 0.0
            delta = new - rho[j]
            if delta != 0.0:
                for k in range(p):
                    grad[k] -= G[k, j] * delta
                rho[j] = new
                if abs(delta) > biggest:
                    biggest = abs(delta)
        if trace.shape[0] > s:
            trace[s] = _objective(G, M, thr, rho)
        if biggest < tol:
            return s + 1, True
    return max_sweeps, False


def kkt_residual(M, G, coef, thresholds) -> float:
    """Largest violation of the Lasso optimality conditions.

    Zero coefficients need ``|M_j - (G rho)_j| <= t_j``; nonzero ones need
    ``M_j - (G rho)_j = sign(rho_j) t_j``.
    """
    g = np.asarray(M) - np.asarray(G) @ coef
    thr = np.asarray(thresholds)
    zero = coef == 0
    viol = np.where(zero, np.maximum(0.0, np.abs(g) - thr), np.abs(g - np.sign(coef) * thr))
    return float(viol.max()) if viol.size else 0.0


def coordinate_descent(M, G, r_L: float, D=None, c3: float = 1.0, warm_start=None,
                       tol: float = 1e-8, max_sweeps: int = 100_000,
                       trace: bool = False) -> CDResult:
    """Cyclic coordinate descent with soft thresholding, ascending index order.

    Coordinates whose Gram diagonal is zero are held at zero. Hitting
    ``max_sweeps`` returns the last iterate with ``converged=False``.
    """
    M = np.ascontiguousarray(M, dtype=np.float64)
    G = np.ascontiguousarray(G, dtype=np.float64)
    p = M.shape[0]
    if G.shape != (p, p):
        raise ValueError(f"Gram matrix shape {G.shape} does not match p={p}")
    D = np.ones(p) if D is None else np.asarray(D, dtype=np.float64)
    if r_L < 0:
        raise ValueError("r_L must be non-negative")
    thr = _thresholds(r_L, D, c3)
    rho = np.zeros(p) if warm_start is None else np.array(warm_start, dtype=np.float64)
    obj = np.empty(max_sweeps if trace else 0)
    sweeps, ok = _cd_sweeps(G, M, thr, rho, float(tol), int(max_sweeps), obj)
    return CDResult(
        coef=rho,
        sweeps=sweeps,
        converged=ok,
        kkt_residual=kkt_residual(M, G, rho, thr),
        objective=obj[:sweeps] if trace else None,
    )


def _low_dim_start(G, M, k):
    flags = []
    Gl, Ml = G[:k, :k], M[:k]
    try:
        if np.linalg.cond(Gl) > 1e12:
            raise np.linalg.LinAlgError
        sol = np.linalg.solve(Gl, Ml)
    except np.linalg.LinAlgError:
        sol = np.linalg.pinv(Gl) @ Ml
        flags.append("singular_low_dim_gram")
    rho = np.zeros(M.shape[0])
    rho[:k] = sol
    return rho, flags


def fit_lasso_md(B, moments, cfg: LassoMDConfig | None = None,
                 intercept: bool = True) -> RieszFit:
    """Tuned minimum-distance Lasso from dictionary rows and moment rows.

    ``B`` is the ``(n, p)`` dictionary evaluated on the training rows and
    ``moments`` the ``(n, p)`` matrix of ``m(W_i, b)``; ``G`` and ``M`` are
    their averages. Starting from a least squares fit on the leading
    ``ceil(p * low_dim_fraction)`` terms, each outer iteration recomputes

        D_j = sqrt(mean_i [b_j(X_i) b(X_i)' rho - m(W_i, b_j)]^2) + ridge_shift

    and re-solves the penalized problem at ``r_L = theoretical_r_L(n, p)``,
    stopping when the coefficients move by less than ``outer_tol`` or after
    ``max_outer_iters`` passes. The ``c3`` discount applies to the first term
    only when ``intercept`` says that term is the constant.
    """
    cfg = cfg or LassoMDConfig()
    B = np.asarray(B, dtype=np.float64)
    moments = np.asarray(moments, dtype=np.float64)
    if moments.ndim == 1:
        moments = moments[:, None]
    n, p = B.shape
    if moments.shape != (n, p):
        raise ValueError(f"moment rows {moments.shape} do not match dictionary {B.shape}")
    G = B.T @ B / n
    M = moments.mean(axis=0)
    c3 = cfg.c3 if intercept else 1.0

    if cfg.fixed_r_L is not None:
        r_L = float(cfg.fixed_r_L)
    else:
        r_L = theoretical_r_L(n, p, cfg.c1, cfg.c2) * cfg.r_L_multiplier

    k = max(1, math.ceil(p * cfg.low_dim_fraction))
    rho, flags = _low_dim_start(G, M, k)

    n_outer = cfg.max_outer_iters if cfg.normalize else 1
    changes: list[float] = []
    D = np.ones(p)
    res = None
    for it in range(n_outer):
        if cfg.normalize:
            resid = B * (B @ rho)[:, None] - moments
            D = np.sqrt(np.mean(resid * resid, axis=0))
            D = np.maximum(D, cfg.d_floor) + cfg.ridge_shift
        start = rho if cfg.warm_start else None
        res = coordinate_descent(M, G, r_L, D, c3, start, cfg.tol, cfg.max_sweeps)
        change = float(np.max(np.abs(res.coef - rho))) if p else 0.0
        changes.append(change)
        rho = res.coef
        if not res.converged:
            break
        if change < cfg.outer_tol:
            break
    if not res.converged:
        flags.append("coordinate_descent_not_converged")
    return RieszFit(
        coef=rho,
        r_L=r_L,
        D=D,
        outer_iters=len(changes),
        kkt_residual=res.kkt_residual,
        learner="lasso_md",
        c3=c3,
        converged=res.converged,
        flags=flags,
        outer_changes=changes,
    )


def _lasso_basis(M, G, lam):
    """Simplex basis at the Lasso solution with penalty ``lam`` on every term.

    That solution satisfies ``|M - G rho|_inf <= lam`` with equality on its
    support, so it is a vertex of the Dantzig feasible set: the basis holds
    ``rho+_j`` or ``rho-_j`` for each support term, the slack of the inactive
    side of each support row, and both slacks of every other row.
    """
    p = M.shape[0]
    rho = coordinate_descent(M, G, lam, tol=1e-12, max_sweeps=10_000).coef
    start = []
    for j in range(p):
        if rho[j] > 0:
            start += [j, 2 * p + j]
        elif rho[j] < 0:
            start += [p + j, 3 * p + j]
        else:
            start += [2 * p + j, 3 * p + j]
    return np.asarray(start)


def fit_dantzig_md(M, G, cfg: DantzigConfig) -> RieszFit:
    """``min |rho|_1`` subject to ``|M - G rho|_inf <= lambda_D``.

    Solved over ``rho = u - v`` with ``u, v >= 0`` by the in-package simplex.
    """
    M = np.asarray(M, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    p = M.shape[0]
    lam = cfg.lambda_d
    if np.max(np.abs(M)) <= lam:
        coef = np.zeros(p)
    else:
        A = np.block([[G, -G], [-G, G]])
        b = np.concatenate([M + lam, lam - M])
        start = _lasso_basis(M, G, lam) if cfg.warm_start else None
        try:
            sol = simplex(np.ones(2 * p), A, b, tol=cfg.tol, start=start)
        except LPError as exc:
            raise LPError(f"Dantzig program failed: {exc}") from exc
        coef = sol.x[:p] - sol.x[p:]
    slack = float(np.max(np.abs(M - G @ coef))) - lam
    return RieszFit(
        coef=coef,
        r_L=lam,
        D=np.ones(p),
        outer_iters=1,
        kkt_residual=max(0.0, slack),
        learner="dantzig_md",
    )


class LassoMDRiesz(BaseEstimator):
    """Estimator wrapper: ``fit(B, moment_rows)``, ``predict(B) = B @ coef_``."""

    def __init__(self, c1=1.0, c2=0.1, c3=0.1, low_dim_fraction=1 / 40,
                 max_outer_iters=10, ridge_shift=0.2, tol=1e-8, fixed_r_L=None,
                 normalize=True, warm_start=True, intercept=True):
        self.c1 = c1
        self.c2 = c2
        self.c3 = c3
        self.low_dim_fraction = low_dim_fraction
        self.max_outer_iters = max_outer_iters
        self.ridge_shift = ridge_shift
        self.tol = tol
        self.fixed_r_L = fixed_r_L
        self.normalize = normalize
        self.warm_start = warm_start
        self.intercept = intercept

    def config(self) -> LassoMDConfig:
        params = self.get_params()
        params.pop("intercept")
        return LassoMDConfig(**params)

    def fit(self, B, moments):
        B = check_array(B)
        moments = check_array(moments, ensure_2d=False)
        self.fit_ = fit_lasso_md(B, moments, self.config(), self.intercept)
        self.coef_ = self.fit_.coef
        self.r_L_ = self.fit_.r_L
        if self.fit_.flags:
            warnings.warn(f"LassoMDRiesz: {', '.join(self.fit_.flags)}", RuntimeWarning)
        return self

    def predict(self, B):
        check_is_fitted(self, "coef_")
        return check_array(B) @ self.coef_


class DantzigMDRiesz(BaseEstimator):
    """Dantzig learner; ``lambda_d=None`` uses the theoretical ``r_L`` level."""

    def __init__(self, lambda_d=None, c1=1.0, c2=0.1, tol=1e-9):
        self.lambda_d = lambda_d
        self.c1 = c1
        self.c2 = c2
        self.tol = tol

    def fit(self, B, moments):
        B = check_array(B)
        moments = check_array(moments, ensure_2d=False)
        if moments.ndim == 1:
            moments = moments[:, None]
        n, p = B.shape
        lam = self.lambda_d
        if lam is None:
            lam = theoretical_r_L(n, p, self.c1, self.c2)
        self.fit_ = fit_dantzig_md(moments.mean(axis=0), B.T @ B / n,
                                   DantzigConfig(lam, self.tol))
        self.coef_ = self.fit_.coef
        return self

    def predict(self, B):
        check_is_fitted(self, "coef_")
        return check_array(B) @ self.coef_
