"""Debiased GMM for moment conditions that are nonlinear in the regression.

With moments ``g(w, gamma, theta)`` (``r`` equations) the Riesz representer
of equation ``k`` is learned from the Gateaux derivative of ``g^k`` in each
dictionary direction. That derivative depends on ``gamma`` and ``theta``, so it
is evaluated at initial estimates fit on rows outside two folds at once: for
fold ``l`` and each other fold ``l'``, rows of ``l'`` use the initial fit from
rows in neither ``l`` nor ``l'``. The debiased moment

    psi(theta) = mean_i [ g(W_i, gamma_l, theta) + alpha_l(X_i) (Y_i - gamma_l(X_i)) ]

is then minimized in the quadratic form ``psi' U psi`` by damped Gauss-Newton
with projection onto a box, and the sandwich variance is reported.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import expit, ndtr, ndtri
from sklearn.base import BaseEstimator

from .data import DataError, Dataset, FoldPlan, make_folds
from .functionals import MomentFunctional, moment_of_regression, moment_rows
from .regression import fit_ols, fit_regression_lasso
from .riesz import LassoMDConfig, fit_lasso_md

__all__ = [
    "GmmModel",
    "LinearMomentModel",
    "BinaryChoice",
    "GmmReport",
    "OptimResult",
    "minimize_gmm",
    "gateaux_rows",
    "gateaux_M",
    "initial_estimators",
    "fit_gmm",
    "DebiasedGMM",
]


class GmmModel:
    """Interface for moment models; all methods act on a block of rows.

    ``moments`` returns ``(n, r)``, ``jacobian`` ``(n, r, q)`` (derivative in
    ``theta``) and ``gateaux`` ``(n, r, p)``: the derivative of each moment
    in the direction of each dictionary term.
    """

    r: int
    q: int
    needs_initial = True

    def validate(self, data: Dataset) -> None:
        pass

    def moments(self, data, rows, gamma, theta) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, data, rows, gamma, theta) -> np.ndarray:
        raise NotImplementedError

    def gateaux(self, data, rows, dictionary, gamma, theta) -> np.ndarray:
        raise NotImplementedError

    def default_bounds(self):
        return np.full(self.q, -1e6), np.full(self.q, 1e6)

    def diagnostics(self, data: Dataset) -> dict:
        return {}

    def start(self) -> np.ndarray:
        return np.zeros(self.q)


class LinearMomentModel(GmmModel):
    """``g(w, gamma, theta) = m(w, gamma) - theta`` for a linear functional."""

    r = 1
    q = 1
    needs_initial = False

    def __init__(self, functional: MomentFunctional):
        self.functional = functional

    def validate(self, data):
        self.functional.validate(data)

    def moments(self, data, rows, gamma, theta):
        m = moment_of_regression(self.functional, gamma, data, rows)
        return (m - theta[0])[:, None]

    def jacobian(self, data, rows, gamma, theta):
        n = len(rows)
        return np.full((n, 1, 1), -1.0)

    def gateaux(self, data, rows, dictionary, gamma, theta):
        return moment_rows(self.functional, dictionary, data, rows)[:, None, :]


def _columns(data, names, rows):
    out = []
    for c in names:
        if c == "1":
            out.append(np.ones(len(rows)))
        else:
            out.append(data[c][rows])
    return np.column_stack(out)


class BinaryChoice(GmmModel):
    """Binary choice with an expected-outcome regressor.

    ``d = 1`` with probability ``F(v' beta + delta [gamma(1, z) - gamma(0, z)])``
    for a known link ``F`` (``probit`` or ``logit``). Moments are
    ``H(v, z) (d - F(index))`` and ``theta = (beta, delta)``. Column name
    ``"1"`` stands for a constant in ``regressors`` and ``instruments``.
    """

    def __init__(self, regressors: Sequence[str], instruments: Sequence[str],
                 treatment: str | None = None, link: str = "probit",
                 bound: float = 50.0):
        if link not in ("probit", "logit"):
            raise ValueError("link must be 'probit' or 'logit'")
        self.regressors = list(regressors)
        self.instruments = list(instruments)
        self.treatment = treatment
        self.link = link
        self.bound = float(bound)
        self.r = len(self.instruments)
        self.q = len(self.regressors) + 1
        if self.r < self.q:
            raise ValueError("need at least as many instruments as parameters")

    def _d(self, data):
        name = self.treatment or data.treatment
        if name is None:
            raise DataError("binary choice needs a treatment column")
        return name

    def validate(self, data):
        d = data[self._d(data)]
        if not np.all((d == 0) | (d == 1)):
            raise DataError("binary choice treatment must be 0/1")
        for c in self.regressors + self.instruments:
            if c != "1" and c not in data:
                raise DataError(f"missing column {c!r}")

    def cdf(self, x):
        return ndtr(x) if self.link == "probit" else expit(x)

    def pdf(self, x):
        if self.link == "probit":
            return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        s = expit(x)
        return s * (1.0 - s)

    def _pieces(self, data, rows, gamma, theta):
        name = self._d(data)
        V = _columns(data, self.regressors, rows)
        H = _columns(data, self.instruments, rows)
        diff = (np.asarray(gamma.at(data, rows, {name: 1.0}, tag="d1"), float)
                - np.asarray(gamma.at(data, rows, {name: 0.0}, tag="d0"), float))
        beta, delta = theta[:-1], theta[-1]
        index = V @ beta + delta * diff
        return name, V, H, diff, index

    def moments(self, data, rows, gamma, theta):
        name, V, H, diff, index = self._pieces(data, rows, gamma, theta)
        d = data[name][rows]
        return H * (d - self.cdf(index))[:, None]

    def jacobian(self, data, rows, gamma, theta):
        name, V, H, diff, index = self._pieces(data, rows, gamma, theta)
        dens = self.pdf(index)
        grad_index = np.column_stack([V, diff])
        return -(H * dens[:, None])[:, :, None] * grad_index[:, None, :]

    def gateaux(self, data, rows, dictionary, gamma, theta):
        name, V, H, diff, index = self._pieces(data, rows, gamma, theta)
        db = dictionary.at(data, rows, {name: 1.0}) - dictionary.at(data, rows, {name: 0.0})
        scale = -self.pdf(index) * theta[-1]
        return (H * scale[:, None])[:, :, None] * db[:, None, :]

    def default_bounds(self):
        return np.full(self.q, -self.bound), np.full(self.q, self.bound)

    def diagnostics(self, data):
        rows = np.arange(data.n_rows)
        return {
            "max_abs_instruments": float(np.max(np.abs(_columns(data, self.instruments, rows)))),
            "max_abs_regressors": float(np.max(np.abs(_columns(data, self.regressors, rows)))),
        }


# -- optimizer ----------------------------------------------------------------

@dataclass
class OptimResult:
    theta: np.ndarray
    objective: float
    grad_norm: float
    iterations: int
    converged: bool
    method: str


def minimize_gmm(moment_fn, jac_fn, theta0, weight, bounds, tol: float = 1e-10,
                 max_iter: int = 200) -> OptimResult:
    """Minimize ``psi(theta)' U psi(theta)`` over a box.

    ``moment_fn(theta)`` returns the averaged moment vector and ``jac_fn``
    its ``(r, q)`` derivative. Steps are Gauss-Newton directions halved until
    the objective decreases, then projected onto the box. A one-parameter
    problem that fails to converge falls back to a golden-section search.
    """
    U = np.asarray(weight, float)
    lo, hi = (np.asarray(b, float) for b in bounds)
    theta = np.clip(np.asarray(theta0, float), lo, hi)

    def objective(t):
        m = moment_fn(t)
        return float(m @ U @ m), m

    f, m = objective(theta)
    converged = False
    grad_norm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        J = jac_fn(theta)
        grad = 2.0 * J.T @ U @ m
        A = J.T @ U @ J
        grad_norm = float(np.max(np.abs(grad)))
        try:
            step = -np.linalg.solve(A, J.T @ U @ m)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(A, J.T @ U @ m, rcond=None)[0]
        t = 1.0
        improved = False
        while t > 1e-10:
            cand = np.clip(theta + t * step, lo, hi)
            fc, mc = objective(cand)
            if fc <= f:
                improved = True
                break
            t *= 0.5
        if not improved:
            converged = grad_norm <= tol * max(1.0, abs(f)) or f <= 1e-28
            break
        moved = float(np.max(np.abs(cand - theta)))
        theta, f, m = cand, fc, mc
        if moved <= tol * (1.0 + float(np.max(np.abs(theta)))):
            converged = True
            break
    method = "gauss_newton"
    if not converged and theta.size == 1:
        res = minimize_scalar(lambda s: objective(np.array([s]))[0],
                              bracket=(float(lo[0]) if np.isfinite(lo[0]) else theta[0] - 1.0,
                                       float(hi[0]) if np.isfinite(hi[0]) else theta[0] + 1.0),
                              method="golden", tol=1e-12)
        theta = np.clip(np.array([res.x]), lo, hi)
        f, m = objective(theta)
        J = jac_fn(theta)
        grad_norm = float(np.max(np.abs(2.0 * J.T @ U @ m)))
        converged = bool(res.success)
        method = "golden_section"
    return OptimResult(theta, f, grad_norm, it, converged, method)


# -- nuisance fits ------------------------------------------------------------

def _fit_regression(regression, dictionary, data, rows, cfg):
    if regression == "lasso":
        return fit_regression_lasso(data, rows, dictionary, cfg)
    if regression == "ols":
        return fit_ols(data, rows, dictionary)
    if hasattr(regression, "at"):
        return regression
    if callable(regression):
        return regression(data, rows)
    raise ValueError(f"unknown regression learner {regression!r}")


def _plugin_theta(model, data, rows, gamma, weight, bounds, start):
    rows = np.asarray(rows)

    def mfn(t):
        return model.moments(data, rows, gamma, t).mean(axis=0)

    def jfn(t):
        return model.jacobian(data, rows, gamma, t).mean(axis=0)

    return minimize_gmm(mfn, jfn, start, weight, bounds)


@dataclass
class InitialFit:
    gamma: object
    theta: np.ndarray
    converged: bool


def initial_estimators(model: GmmModel, dictionary, data: Dataset, plan: FoldPlan,
                       regression="lasso", regression_config=None,
                       bounds=None) -> dict[tuple[int, int], InitialFit]:
    """Plug-in fits on the rows outside each unordered pair of folds.

    The initial weight matrix is the identity. Keys are ``(l, l')`` with
    ``l < l'``.
    """
    if plan.L < 3:
        raise DataError("need L ≥ 3 for double split")
    bounds = bounds or model.default_bounds()
    out = {}
    for a, b in itertools.combinations(range(plan.L), 2):
        rows = plan.complement(a, b)
        if rows.size == 0:
            raise DataError(f"empty double complement for folds {a} and {b}")
        gamma = _fit_regression(regression, dictionary, data, rows, regression_config)
        res = _plugin_theta(model, data, rows, gamma, np.eye(model.r), bounds, model.start())
        out[(a, b)] = InitialFit(gamma, res.theta, res.converged)
    return out


def _pair(a, b):
    return (a, b) if a < b else (b, a)


def gateaux_rows(model: GmmModel, fold: int, dictionary, data: Dataset, plan: FoldPlan,
                 initial=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-row Gateaux derivatives on the complement of ``fold``.

    Returns ``(rows, values)`` with ``values`` of shape ``(n_rows, r, p)``;
    their column means form ``M^k`` for each equation ``k``.
    """
    rows = plan.complement(fold)
    if not model.needs_initial:
        return rows, model.gateaux(data, rows, dictionary, None, model.start())
    if initial is None:
        raise DataError("this model needs initial estimators for its Gateaux derivative")
    values = np.empty((rows.size, model.r, dictionary.p))
    pos = {int(r): k for k, r in enumerate(rows)}
    for other in range(plan.L):
        if other == fold:
            continue
        sub = plan.rows(other)
        init = initial[_pair(fold, other)]
        vals = model.gateaux(data, sub, dictionary, init.gamma, init.theta)
        values[[pos[int(r)] for r in sub]] = vals
    return rows, values


def gateaux_M(model: GmmModel, fold: int, dictionary, data: Dataset, plan: FoldPlan,
              initial=None) -> np.ndarray:
    """``M^k`` for every equation as an ``(r, p)`` array."""
    _, values = gateaux_rows(model, fold, dictionary, data, plan, initial)
    return values.mean(axis=0)


# -- estimation ---------------------------------------------------------------

@dataclass
class GmmReport:
    theta: np.ndarray
    variance: np.ndarray
    std_error: np.ndarray
    G: np.ndarray
    Psi: np.ndarray
    weight: np.ndarray
    objective: float
    grad_norm: float
    converged: bool
    n: int
    initial: dict = field(default_factory=dict, repr=False)
    riesz_fits: list = field(default_factory=list, repr=False)
    influence: np.ndarray | None = field(default=None, repr=False)
    flags: list[str] = field(default_factory=list)
    # sample bounds on the model's data pieces; reported, never used to reject
    diagnostics: dict = field(default_factory=dict)

    def confint(self, level: float = 0.95):
        z = float(ndtri(0.5 + level / 2.0))
        return self.theta - z * self.std_error, self.theta + z * self.std_error

    def to_dict(self) -> dict:
        lo, hi = self.confint()
        return {
            "kind": "gmm",
            "theta": self.theta.tolist(),
            "variance": self.variance.tolist(),
            "std_error": self.std_error.tolist(),
            "ci95": [lo.tolist(), hi.tolist()],
            "objective": self.objective,
            "grad_norm": self.grad_norm,
            "converged": self.converged,
            "n": self.n,
            "initial": {f"{a},{b}": v.theta.tolist() for (a, b), v in self.initial.items()},
            "flags": sorted(set(self.flags)),
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def fit_gmm(model: GmmModel, dictionary, data: Dataset, folds: FoldPlan | int = 5, *,
            seed: int = 0, regression="lasso", riesz_config: LassoMDConfig | None = None,
            regression_config: LassoMDConfig | None = None, weight=None, bounds=None,
            iterate: bool = False) -> GmmReport:
    """Cross-fitted debiased GMM estimate with sandwich variance.

    ``weight`` is the GMM weight matrix (identity by default). With
    ``iterate=True`` a second pass replaces every initial ``theta`` with the
    first debiased estimate.
    """
    model.validate(data)
    plan = folds if isinstance(folds, FoldPlan) else make_folds(data, folds, seed)
    U = np.eye(model.r) if weight is None else np.atleast_2d(np.asarray(weight, float))
    if U.shape != (model.r, model.r):
        raise ValueError(f"weight matrix must be {model.r}x{model.r}")
    if not np.allclose(U, U.T) or np.linalg.eigvalsh(0.5 * (U + U.T)).min() < -1e-12:
        raise ValueError("weight matrix must be symmetric positive semidefinite")
    bounds = bounds or model.default_bounds()
    n = data.n_rows
    y = data.y

    # final-stage regressions, one per fold
    gammas = []
    for l in range(plan.L):
        gammas.append(_fit_regression(regression, dictionary, data,
                                      plan.complement(l), regression_config))
    initial = (initial_estimators(model, dictionary, data, plan, regression,
                                  regression_config, bounds)
               if model.needs_initial else {})

    def debias(initial):
        corr = np.zeros((n, model.r))
        fits, flags = [], []
        for l in range(plan.L):
            train, grows = gateaux_rows(model, l, dictionary, data, plan, initial)
            B = dictionary.at(data, train)
            test = plan.rows(l)
            Btest = dictionary.at(data, test)
            resid = y[test] - np.asarray(gammas[l].at(data, test, None, tag="plain"), float)
            fold_fits = []
            for k in range(model.r):
                rf = fit_lasso_md(B, grows[:, k, :], riesz_config,
                                  intercept=dictionary.has_intercept)
                flags.extend(rf.flags)
                fold_fits.append(rf)
                corr[test, k] = (Btest @ rf.coef) * resid
            fits.append(fold_fits)
        return corr, fits, flags

    def solve(corr):
        def mfn(t):
            out = np.zeros(model.r)
            for l in range(plan.L):
                test = plan.rows(l)
                out += model.moments(data, test, gammas[l], t).sum(axis=0)
            return (out + corr.sum(axis=0)) / n

        def jfn(t):
            out = np.zeros((model.r, model.q))
            for l in range(plan.L):
                test = plan.rows(l)
                out += model.jacobian(data, test, gammas[l], t).sum(axis=0)
            return out / n

        start = (np.mean([v.theta for v in initial.values()], axis=0)
                 if initial else model.start())
        return minimize_gmm(mfn, jfn, start, U, bounds), jfn

    corr, fits, flags = debias(initial)
    res, jfn = solve(corr)
    if iterate and model.needs_initial:
        initial = {k: InitialFit(v.gamma, res.theta.copy(), True) for k, v in initial.items()}
        corr, fits, flags = debias(initial)
        res, jfn = solve(corr)

    psi = np.zeros((n, model.r))
    for l in range(plan.L):
        test = plan.rows(l)
        psi[test] = model.moments(data, test, gammas[l], res.theta)
    psi += corr
    G = jfn(res.theta)
    Psi = psi.T @ psi / n
    A = G.T @ U @ G
    try:
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular G'UG in sandwich variance") from exc
    V = Ainv @ G.T @ U @ Psi @ U @ G @ Ainv
    V = 0.5 * (V + V.T)
    if not res.converged:
        flags.append("gmm_optimizer_not_converged")
    if any(not v.converged for v in initial.values()):
        flags.append("initial_estimator_not_converged")
    return GmmReport(
        theta=res.theta,
        variance=V,
        std_error=np.sqrt(np.maximum(np.diag(V), 0.0) / n),
        G=G,
        Psi=Psi,
        weight=U,
        objective=res.objective,
        grad_norm=res.grad_norm,
        converged=res.converged,
        n=n,
        initial=initial,
        riesz_fits=fits,
        influence=psi,
        flags=flags,
        diagnostics=model.diagnostics(data),
    )


class DebiasedGMM(BaseEstimator):
    """Estimator interface around :func:`fit_gmm`."""

    def __init__(self, model=None, dictionary=None, n_folds=5, seed=0,
                 regression="lasso", riesz_config=None, regression_config=None,
                 weight=None, bounds=None, iterate=False):
        self.model = model
        self.dictionary = dictionary
        self.n_folds = n_folds
        self.seed = seed
        self.regression = regression
        self.riesz_config = riesz_config
        self.regression_config = regression_config
        self.weight = weight
        self.bounds = bounds
        self.iterate = iterate

    def fit(self, data: Dataset, y=None):
        self.report_ = fit_gmm(
            self.model, self.dictionary, data, self.n_folds, seed=self.seed,
            regression=self.regression, riesz_config=self.riesz_config,
            regression_config=self.regression_config, weight=self.weight,
            bounds=self.bounds, iterate=self.iterate,
        )
        self.theta_ = self.report_.theta
        self.std_error_ = self.report_.std_error
        self.variance_ = self.report_.variance
        return self
