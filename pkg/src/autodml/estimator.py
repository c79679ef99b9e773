"""Cross-fitted debiased estimation of linear functionals of a regression.

For each fold the Riesz representer and the regression are learned on the
other folds, and every held-out row contributes

    m(W_i, gamma_l) + alpha_l(X_i) * (Y_i - gamma_l(X_i)).

The estimate is the plain average of these contributions over all rows, the
influence values are the contributions minus the estimate, and the variance
is their mean square (or its cluster-summed analogue for panels).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import ndtri
from sklearn.base import BaseEstimator

from .data import DataError, Dataset, FoldPlan, make_folds
from .dictionary import PanelDictionary
from .functionals import CrossAverage, MomentFunctional, moment_of_regression, moment_rows
from .lp import LPError
from .regression import fit_ols, fit_regression_lasso
from .riesz import (DantzigConfig, LassoMDConfig, RieszFit, fit_dantzig_md,
                    fit_lasso_md, theoretical_r_L)

__all__ = [
    "EstimateReport",
    "TransformReport",
    "DecompositionReport",
    "FoldFailure",
    "estimate",
    "variance_clustered",
    "cluster_cross_moment",
    "transform_att",
    "transform_elasticity",
    "transform_elasticities",
    "regression_decomposition",
    "write_influence_csv",
    "AutoDML",
]


class FoldFailure(RuntimeError):
    """A fold's nuisance fit broke down numerically."""


def _z(level: float) -> float:
    return float(ndtri(0.5 + level / 2.0))


@dataclass
class EstimateReport:
    theta: float
    variance: float
    std_error: float
    influence: np.ndarray
    n: int
    n_effective: int
    functional: str
    variance_iid: float
    clustered: bool
    folds: list[dict] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    dropped_folds: list[int] = field(default_factory=list)
    # largest |b_j(X_i)| over the sample; reported, never used to reject
    max_abs_dictionary: float | None = None
    # per-row pieces, kept for transforms and diagnostics (not serialized)
    plugin: np.ndarray | None = field(default=None, repr=False)
    alpha: np.ndarray | None = field(default=None, repr=False)
    residual: np.ndarray | None = field(default=None, repr=False)
    used: np.ndarray | None = field(default=None, repr=False)
    cluster_ids: np.ndarray | None = field(default=None, repr=False)
    riesz_fits: list = field(default_factory=list, repr=False)
    regression_fits: list = field(default_factory=list, repr=False)

    def confint(self, level: float = 0.95) -> tuple[float, float]:
        half = _z(level) * self.std_error
        return self.theta - half, self.theta + half

    def to_dict(self) -> dict:
        lo, hi = self.confint()
        return {
            "kind": "estimate",
            "functional": self.functional,
            "theta": self.theta,
            "variance": self.variance,
            "variance_iid": self.variance_iid,
            "std_error": self.std_error,
            "ci95": [lo, hi],
            "n": self.n,
            "n_effective": self.n_effective,
            "clustered": self.clustered,
            "folds": self.folds,
            "flags": sorted(set(self.flags)),
            "dropped_folds": self.dropped_folds,
            "max_abs_dictionary": self.max_abs_dictionary,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


@dataclass
class TransformReport:
    name: str
    theta_star: float
    variance: float
    std_error: float
    components: dict[str, float]
    jacobian: np.ndarray
    vtilde: np.ndarray
    n: int

    def confint(self, level: float = 0.95) -> tuple[float, float]:
        half = _z(level) * self.std_error
        return self.theta_star - half, self.theta_star + half

    def to_dict(self) -> dict:
        lo, hi = self.confint()
        return {
            "kind": "transform",
            "name": self.name,
            "theta_star": self.theta_star,
            "variance": self.variance,
            "std_error": self.std_error,
            "ci95": [lo, hi],
            "components": self.components,
            "jacobian": np.asarray(self.jacobian).tolist(),
            "n": self.n,
        }


@dataclass
class DecompositionReport:
    cross_average: EstimateReport
    response: TransformReport
    composition: TransformReport

    def to_dict(self) -> dict:
        return {
            "kind": "decomposition",
            "cross_average": self.cross_average.to_dict(),
            "response": self.response.to_dict(),
            "composition": self.composition.to_dict(),
        }


# -- nuisance learners --------------------------------------------------------

def _fit_riesz(riesz, f, dictionary, data, train, cfg, dantzig_lambda):
    if riesz == "lasso":
        B = dictionary.at(data, train)
        mr = moment_rows(f, dictionary, data, train)
        return fit_lasso_md(B, mr, cfg, intercept=dictionary.has_intercept)
    if riesz == "dantzig":
        B = dictionary.at(data, train)
        mr = moment_rows(f, dictionary, data, train)
        n, p = B.shape
        lam = dantzig_lambda
        if lam is None:
            c = cfg or LassoMDConfig()
            lam = theoretical_r_L(n, p, c.c1, c.c2)
        return fit_dantzig_md(mr.mean(axis=0), B.T @ B / n, DantzigConfig(lam))
    if riesz == "none":
        return None
    if hasattr(riesz, "at"):
        return riesz
    raise ValueError(f"unknown riesz learner {riesz!r}")


def _alpha_values(fit, dictionary, data, rows):
    if fit is None:
        return np.zeros(len(rows))
    if isinstance(fit, RieszFit):
        return dictionary.at(data, rows) @ fit.coef
    return np.asarray(fit.at(data, rows, None, tag="plain"), float)


def _fit_regression(regression, dictionary, data, train, cfg):
    if regression == "lasso":
        return fit_regression_lasso(data, train, dictionary, cfg)
    if regression == "ols":
        return fit_ols(data, train, dictionary)
    if hasattr(regression, "at"):
        return regression
    if callable(regression):
        return regression(data, train)
    raise ValueError(f"unknown regression learner {regression!r}")


def _riesz_diag(fit):
    if fit is None:
        return {"learner": "none"}
    if not isinstance(fit, RieszFit):
        return {"learner": "supplied"}
    return {
        "learner": fit.learner,
        "r_L": fit.r_L,
        "kkt_residual": fit.kkt_residual,
        "outer_iters": fit.outer_iters,
        "converged": fit.converged,
    }


def _regression_diag(fit):
    out = {"kind": getattr(fit, "kind", "supplied")}
    tuning = getattr(fit, "tuning", None)
    if tuning is not None:
        out["r_L"] = tuning.r_L
        out["kkt_residual"] = tuning.kkt_residual
    return out


# -- variance -----------------------------------------------------------------

def _cluster_sums(values, ids):
    """Per-cluster column sums, clusters ordered by first appearance."""
    values = np.asarray(values, float)
    _, first, inverse = np.unique(ids, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    # relabel so cluster order follows row order
    rank = np.empty_like(first)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    inverse = rank[inverse]
    if values.ndim == 1:
        return np.bincount(inverse, weights=values, minlength=first.size)
    return np.stack([np.bincount(inverse, weights=v, minlength=first.size)
                     for v in values.T], axis=1)


def cluster_cross_moment(a, b, ids=None) -> float | np.ndarray:
    """``(1/N) sum_i (sum_{t in i} a_it)(sum_{s in i} b_is)`` over clusters ``i``.

    ``ids=None`` treats every row as its own cluster. With 2-d inputs the
    result is the matrix of all column pairs.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    N = a.shape[0]
    if ids is not None:
        a = _cluster_sums(a, ids)
        b = _cluster_sums(b, ids)
    if a.ndim == 1 and b.ndim == 1:
        return float(np.sum(a * b) / N)
    a2 = a if a.ndim == 2 else a[:, None]
    b2 = b if b.ndim == 2 else b[:, None]
    return a2.T @ b2 / N


def variance_clustered(report_or_psi, cluster_ids=None) -> float:
    """Cluster-summed variance ``(1/N) sum_i sum_{t,s} psi_it psi_is``.

    Accepts an :class:`EstimateReport` (its own cluster ids are used when
    ``cluster_ids`` is omitted) or a raw influence vector. With singleton
    clusters this is exactly the mean of ``psi^2``.
    """
    if isinstance(report_or_psi, EstimateReport):
        psi = report_or_psi.influence
        if cluster_ids is None:
            cluster_ids = report_or_psi.cluster_ids
    else:
        psi = np.asarray(report_or_psi, float)
    if cluster_ids is None:
        cluster_ids = np.arange(psi.size)
    cluster_ids = np.asarray(cluster_ids)
    if cluster_ids.shape != psi.shape:
        raise DataError("cluster ids must have one entry per influence value")
    return cluster_cross_moment(psi, psi, cluster_ids)


def _mean_square(psi) -> float:
    return float(np.sum(psi * psi) / psi.size)


# -- estimation ---------------------------------------------------------------

_NUMERICAL_FAILURES = (np.linalg.LinAlgError, LPError, FloatingPointError, FoldFailure)


def estimate(functional: MomentFunctional, dictionary, data: Dataset,
             folds: FoldPlan | int = 5, *, seed: int = 0,
             riesz="lasso", regression="lasso",
             riesz_config: LassoMDConfig | None = None,
             regression_config: LassoMDConfig | None = None,
             dantzig_lambda: float | None = None,
             cluster: bool | None = None,
             on_fold_failure: str = "error") -> EstimateReport:
    """Cross-fitted debiased estimate of ``E[m(W, gamma_0)]``.

    ``riesz`` is ``"lasso"``, ``"dantzig"``, ``"none"`` (no correction term,
    i.e. the plug-in estimator) or a fitted evaluator such as a known
    representer. ``regression`` is ``"lasso"``, ``"ols"``, a fitted
    evaluator (external table, known function) or a callable
    ``learner(data, train_rows) -> evaluator``. ``cluster=None`` uses the
    cluster-summed variance whenever the data carry cluster ids.
    ``on_fold_failure="drop"`` skips folds whose fits fail numerically and
    averages over the remaining rows; the default raises.
    """
    if on_fold_failure not in ("error", "drop"):
        raise ValueError("on_fold_failure must be 'error' or 'drop'")
    functional.validate(data)
    if isinstance(folds, FoldPlan):
        if folds.assignment.shape[0] != data.n_rows:
            raise DataError("fold plan does not match the dataset")
        plan = folds
    else:
        plan = make_folds(data, folds, seed)
    if isinstance(dictionary, PanelDictionary) and not hasattr(dictionary, "centered_"):
        dictionary.fit(data)

    n = data.n_rows
    y = data.y
    plugin = np.zeros(n)
    alpha = np.zeros(n)
    resid = np.zeros(n)
    used = np.ones(n, dtype=bool)
    fold_diag, flags, dropped = [], [], []
    riesz_fits, regression_fits = [], []

    for l in range(plan.L):
        test = plan.rows(l)
        train = plan.complement(l)
        try:
            rf = _fit_riesz(riesz, functional, dictionary, data, train,
                            riesz_config, dantzig_lambda)
            gf = _fit_regression(regression, dictionary, data, train, regression_config)
            a = _alpha_values(rf, dictionary, data, test)
            m = moment_of_regression(functional, gf, data, test)
            g = np.asarray(gf.at(data, test, None, tag="plain"), float)
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(m)) and np.all(np.isfinite(g))):
                raise FoldFailure(f"non-finite nuisance values in fold {l}")
        except _NUMERICAL_FAILURES as exc:
            if on_fold_failure == "error":
                raise FoldFailure(f"fold {l} failed: {exc}") from exc
            used[test] = False
            dropped.append(l)
            flags.append("fold_dropped")
            riesz_fits.append(None)
            regression_fits.append(None)
            fold_diag.append({"fold": l, "size": int(test.size),
                              "train_size": int(train.size), "failed": str(exc)})
            continue
        plugin[test] = m
        alpha[test] = a
        resid[test] = y[test] - g
        riesz_fits.append(rf)
        regression_fits.append(gf)
        fold_flags = list(getattr(rf, "flags", []) or []) + list(getattr(gf, "flags", []) or [])
        flags.extend(fold_flags)
        fold_diag.append({
            "fold": l,
            "size": int(test.size),
            "train_size": int(train.size),
            "riesz": _riesz_diag(rf),
            "regression": _regression_diag(gf),
            "flags": fold_flags,
        })

    if not used.any():
        raise FoldFailure("every fold failed")
    contrib = (plugin + alpha * resid)[used]
    theta = float(np.sum(contrib) / contrib.size)
    psi = contrib - theta
    n_used = int(psi.size)
    v_iid = _mean_square(psi)
    clustered = (data.cluster is not None) if cluster is None else bool(cluster)
    ids = data.cluster_ids()[used] if clustered else None
    variance = variance_clustered(psi, ids) if clustered else v_iid
    return EstimateReport(
        theta=theta,
        variance=variance,
        std_error=math.sqrt(variance / n_used),
        influence=psi,
        n=n,
        n_effective=n_used,
        functional=functional.name,
        variance_iid=v_iid,
        clustered=clustered,
        folds=fold_diag,
        flags=flags,
        dropped_folds=dropped,
        max_abs_dictionary=float(np.max(np.abs(dictionary.at(data)))),
        plugin=plugin[used],
        alpha=alpha[used],
        residual=resid[used],
        used=used,
        cluster_ids=ids,
        riesz_fits=riesz_fits,
        regression_fits=regression_fits,
    )


# -- delta method -------------------------------------------------------------

def _rows_of(report: EstimateReport, data: Dataset):
    mask = report.used if report.used is not None else np.ones(data.n_rows, bool)
    if mask.shape[0] != data.n_rows:
        raise DataError("report and dataset have different row counts")
    return mask


def _finish(name, theta_star, H, V, components, n):
    H = np.atleast_2d(np.asarray(H, float))
    var = float((H @ V @ H.T)[0, 0])
    var = max(var, 0.0)
    return TransformReport(name, float(theta_star), var, math.sqrt(var / n),
                           components, H[0], V, n)


def transform_att(report: EstimateReport, data: Dataset) -> TransformReport:
    """Response effect (ATT) from a cross-average estimate.

    ``theta* = (mean(DY) - theta) / mean(D)`` with variance ``H V H'`` where
    ``V`` holds the empirical second moments of ``(psi, DY, D)``; the
    cluster-summed analogues are used when the report is clustered.
    """
    mask = _rows_of(report, data)
    d = data.d[mask]
    y = data.y[mask]
    n = d.size
    mD = float(np.mean(d))
    if mD == 0.0:
        raise DataError("no treated units")
    dy = d * y
    mDY = float(np.mean(dy))
    theta = report.theta
    psi = report.influence
    H = [-1.0 / mD, 1.0 / mD, (theta - mDY) / mD ** 2]
    if report.clustered:
        ids = report.cluster_ids
        stacked = np.column_stack([psi, dy - mDY, d - mD])
        V = cluster_cross_moment(stacked, stacked, ids)
    else:
        V = np.empty((3, 3))
        V[0, 0] = _mean_square(psi)
        V[0, 1] = V[1, 0] = float(np.mean(psi * dy))
        V[0, 2] = V[2, 0] = float(np.mean(psi * d))
        V[1, 1] = float(np.mean(dy * dy)) - mDY ** 2
        V[1, 2] = V[2, 1] = (1.0 - mD) * mDY
        V[2, 2] = (1.0 - mD) * mD
    return _finish("att", (mDY - theta) / mD, H, V,
                   {"theta": theta, "mean_DY": mDY, "mean_D": mD}, n)


_ELASTICITY_SHIFT = {"income": 1.0, "own_price": 1.0, "cross_price": 0.0}


def transform_elasticities(reports: Mapping[str, EstimateReport],
                           data: Dataset) -> dict[str, TransformReport]:
    """Joint elasticity transform of several average-derivative estimates.

    Each entry is ``theta_k / mean(Y)``, minus one for income and own-price
    elasticities. The joint ``V`` stacks every influence vector with the
    centered outcome; each returned report carries its own row of ``H``.
    """
    kinds = list(reports)
    for k in kinds:
        if k not in _ELASTICITY_SHIFT:
            raise ValueError(f"unknown elasticity kind {k!r}; choose from {sorted(_ELASTICITY_SHIFT)}")
    first = reports[kinds[0]]
    mask = _rows_of(first, data)
    for k in kinds[1:]:
        if not np.array_equal(_rows_of(reports[k], data), mask):
            raise DataError("elasticity reports must use the same rows")
    y = data.y[mask]
    mY = float(np.mean(y))
    if mY == 0.0:
        raise DataError("zero mean outcome")
    thetas = np.array([reports[k].theta for k in kinds])
    stacked = np.column_stack([reports[k].influence for k in kinds] + [y - mY])
    ids = first.cluster_ids if first.clustered else None
    V = np.atleast_2d(cluster_cross_moment(stacked, stacked, ids))
    q = len(kinds)
    H = np.zeros((q, q + 1))
    H[:, :q] = np.eye(q) / mY
    H[:, q] = -thetas / mY ** 2
    out = {}
    for i, k in enumerate(kinds):
        est = thetas[i] / mY - _ELASTICITY_SHIFT[k]
        out[k] = _finish(k, est, H[i:i + 1], V,
                         {"theta": float(thetas[i]), "mean_Y": mY}, y.size)
    return out


def transform_elasticity(report: EstimateReport, data: Dataset, kind: str = "own_price") -> TransformReport:
    """Single elasticity: ``H = [1/mean(Y), -theta/mean(Y)^2]``."""
    return transform_elasticities({kind: report}, data)[kind]


def regression_decomposition(data: Dataset, dictionary, folds: FoldPlan | int = 5, **kwargs
                             ) -> DecompositionReport:
    """Split ``E[Y|D=1] - E[Y|D=0]`` into response and composition effects.

    Both come from one cross-average estimate ``theta = E[D gamma(0, Z)]``:
    response ``(E[DY] - theta)/E[D]`` and composition
    ``theta/E[D] - E[(1-D)Y]/E[1-D]``. The composition Jacobian with respect
    to ``(theta, E[DY], E[D], E[(1-D)Y])`` is
    ``[1/E[D], 0, -theta/E[D]^2 - E[(1-D)Y]/(1-E[D])^2, -1/(1-E[D])]``.
    """
    d = data.d
    if not (np.any(d == 1) and np.any(d == 0)):
        raise DataError("regression decomposition needs both treatment arms")
    rep = estimate(CrossAverage(), dictionary, data, folds, **kwargs)
    mask = _rows_of(rep, data)
    d = data.d[mask]
    y = data.y[mask]
    n = d.size
    mD = float(np.mean(d))
    if mD == 0.0 or mD == 1.0:
        raise DataError("empty treatment arm after dropping folds")
    dy = d * y
    oy = (1.0 - d) * y
    mDY, mOY = float(np.mean(dy)), float(np.mean(oy))
    theta = rep.theta
    stacked = np.column_stack([rep.influence, dy - mDY, d - mD, oy - mOY])
    ids = rep.cluster_ids if rep.clustered else None
    V = cluster_cross_moment(stacked, stacked, ids)
    comps = {"theta": theta, "mean_DY": mDY, "mean_D": mD, "mean_1mD_Y": mOY}
    H_resp = [-1.0 / mD, 1.0 / mD, (theta - mDY) / mD ** 2, 0.0]
    H_comp = [1.0 / mD, 0.0, -theta / mD ** 2 - mOY / (1.0 - mD) ** 2, -1.0 / (1.0 - mD)]
    resp = _finish("response", (mDY - theta) / mD, H_resp, V, comps, n)
    comp = _finish("composition", theta / mD - mOY / (1.0 - mD), H_comp, V, comps, n)
    return DecompositionReport(rep, resp, comp)


def write_influence_csv(report: EstimateReport, path) -> None:
    """Per-row influence values keyed by 0-based row id."""
    rows = np.flatnonzero(report.used) if report.used is not None else np.arange(report.influence.size)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "influence"])
        for r, v in zip(rows, report.influence):
            w.writerow([int(r), repr(float(v))])


class AutoDML(BaseEstimator):
    """Estimator interface around :func:`estimate`.

    ``AutoDML(ATE(), parse_dictionary("split(d, poly(z, 2))")).fit(data)``
    exposes ``theta_``, ``std_error_``, ``influence_`` and ``report_``.
    """

    def __init__(self, functional=None, dictionary=None, n_folds=5, seed=0,
                 riesz="lasso", regression="lasso", riesz_config=None,
                 regression_config=None, dantzig_lambda=None, cluster=None,
                 on_fold_failure="error"):
        self.functional = functional
        self.dictionary = dictionary
        self.n_folds = n_folds
        self.seed = seed
        self.riesz = riesz
        self.regression = regression
        self.riesz_config = riesz_config
        self.regression_config = regression_config
        self.dantzig_lambda = dantzig_lambda
        self.cluster = cluster
        self.on_fold_failure = on_fold_failure

    def fit(self, data: Dataset, y=None):
        if not isinstance(data, Dataset):
            raise TypeError("AutoDML.fit expects a Dataset")
        if self.functional is None or self.dictionary is None:
            raise ValueError("AutoDML needs a functional and a dictionary")
        self.report_ = estimate(
            self.functional, self.dictionary, data, self.n_folds, seed=self.seed,
            riesz=self.riesz, regression=self.regression,
            riesz_config=self.riesz_config, regression_config=self.regression_config,
            dantzig_lambda=self.dantzig_lambda, cluster=self.cluster,
            on_fold_failure=self.on_fold_failure,
        )
        self.theta_ = self.report_.theta
        self.variance_ = self.report_.variance
        self.std_error_ = self.report_.std_error
        self.influence_ = self.report_.influence
        return self

    def confint(self, level: float = 0.95):
        if not hasattr(self, "report_"):
            raise RuntimeError("AutoDML is not fitted")
        return self.report_.confint(level)
