"""Regression learners for ``gamma(x) = E[Y | X = x]``.

Every fit exposes the evaluator protocol used by the functionals:
``at(data, rows, override, tag)`` and ``partial(data, wrt, rows, override, tag)``.
Internal fits (Lasso minimum distance, OLS) are coefficient vectors over a
dictionary and so can be evaluated anywhere. Externally trained learners enter
through a prediction table keyed by row id and evaluation tag.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils import check_array, check_X_y
from sklearn.utils.validation import check_is_fitted

from .data import DataError, Dataset
from .dictionary import _frame
from .functionals import RegressionMoment, moment_rows
from .riesz import LassoMDConfig, RieszFit, fit_lasso_md

__all__ = [
    "RegressionFit",
    "ExternalFit",
    "FunctionFit",
    "fit_regression_lasso",
    "fit_ols",
    "predict",
    "load_prediction_table",
    "LassoMDRegressor",
]


@dataclass
class RegressionFit:
    """Coefficients over a dictionary, trained on ``train_rows``."""

    kind: str
    coef: np.ndarray
    dictionary: object
    train_rows: np.ndarray | None = None
    flags: list[str] = field(default_factory=list)
    tuning: RieszFit | None = None

    def at(self, data, rows=None, override=None, tag=None) -> np.ndarray:
        return self.dictionary.at(data, rows, override) @ self.coef

    def partial(self, data, wrt, rows=None, override=None, tag=None) -> np.ndarray:
        return self.dictionary.partial(data, wrt, rows, override) @ self.coef

    def __add__(self, other: "RegressionFit") -> "RegressionFit":
        if other.dictionary is not self.dictionary:
            raise ValueError("fits must share a dictionary to be added")
        return RegressionFit("sum", self.coef + other.coef, self.dictionary)


class FunctionFit:
    """A known regression given as a function of the column mapping.

    ``fn(cols)`` returns one value per row; ``derivative(cols, wrt)`` is only
    needed by derivative functionals. Used for closed-form truths and for
    deliberately misspecified nuisances in tests.
    """

    kind = "function"

    def __init__(self, fn: Callable, derivative: Callable | None = None):
        self.fn = fn
        self.derivative = derivative

    def at(self, data, rows=None, override=None, tag=None):
        cols, n = _frame(data, rows, override)
        return np.broadcast_to(np.asarray(self.fn(cols), float), (n,)).copy()

    def partial(self, data, wrt, rows=None, override=None, tag=None):
        if self.derivative is None:
            raise DataError("this regression has no derivative")
        cols, n = _frame(data, rows, override)
        return np.broadcast_to(np.asarray(self.derivative(cols, wrt), float), (n,)).copy()


class ExternalFit:
    """Predictions made elsewhere, looked up by ``(row_id, point_tag)``.

    Row ids are 0-based positions in the dataset. Counterfactual overrides are
    ignored: the tag alone says which evaluation point was precomputed
    (``plain``, ``d1``, ``d0``, ``deriv``, ``transport``).
    """

    kind = "external"

    def __init__(self, table: dict[tuple[int, str], float]):
        self.table = dict(table)

    @property
    def tags(self) -> set[str]:
        return {t for _, t in self.table}

    def _lookup(self, data, rows, tag):
        tag = tag or "plain"
        idx = np.arange(data.n_rows) if rows is None else np.asarray(rows)
        out = np.empty(idx.size)
        for k, i in enumerate(idx):
            try:
                out[k] = self.table[(int(i), tag)]
            except KeyError:
                raise DataError(
                    f"external predictions missing row {int(i)}, point {tag!r}"
                ) from None
        return out

    def at(self, data, rows=None, override=None, tag=None):
        return self._lookup(data, rows, tag)

    def partial(self, data, wrt, rows=None, override=None, tag=None):
        if "deriv" not in self.tags:
            raise DataError("external predictions have no 'deriv' column; "
                            "derivative functionals cannot use them")
        return self._lookup(data, rows, "deriv")


def load_prediction_table(path) -> ExternalFit:
    """Read a ``row_id, point_tag, value`` CSV into an :class:`ExternalFit`."""
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc.strerror}") from exc
    table = {}
    with fh:
        reader = csv.DictReader(fh)
        need = {"row_id", "point_tag", "value"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataError(f"{path}: prediction table needs columns {sorted(need)}")
        for r, row in enumerate(reader, start=1):
            try:
                key = (int(row["row_id"]), row["point_tag"].strip())
                table[key] = float(row["value"])
            except (TypeError, ValueError):
                raise DataError(f"{path}: bad prediction row {r}") from None
    if not table:
        raise DataError(f"{path}: empty file")
    return ExternalFit(table)


def fit_regression_lasso(data: Dataset, rows, dictionary,
                         cfg: LassoMDConfig | None = None) -> RegressionFit:
    """Lasso regression as the minimum-distance problem with ``m(w, b) = y b(x)``."""
    B = dictionary.at(data, rows)
    mr = moment_rows(RegressionMoment(), dictionary, data, rows)
    tuned = fit_lasso_md(B, mr, cfg, intercept=dictionary.has_intercept)
    return RegressionFit("lasso_md", tuned.coef, dictionary,
                         None if rows is None else np.asarray(rows),
                         list(tuned.flags), tuned)


def fit_ols(data: Dataset, rows, dictionary) -> RegressionFit:
    """Least squares via the normal equations; pseudo-inverse if rank deficient."""
    B = dictionary.at(data, rows)
    y = data.y if rows is None else data.y[np.asarray(rows)]
    n, p = B.shape
    G = B.T @ B / n
    My = B.T @ y / n
    flags = []
    if np.linalg.matrix_rank(G) < p:
        coef = np.linalg.pinv(G) @ My
        flags.append("rank_deficient_ols")
    else:
        coef = np.linalg.solve(G, My)
    return RegressionFit("ols", coef, dictionary,
                         None if rows is None else np.asarray(rows), flags)


def predict(fit, data, rows=None, override=None, tag=None, wrt=None) -> np.ndarray:
    """Evaluate ``fit`` (or its partial in ``wrt``) at possibly overridden rows."""
    if wrt is not None:
        return fit.partial(data, wrt, rows, override, tag or "deriv")
    return fit.at(data, rows, override, tag)


class LassoMDRegressor(RegressorMixin, BaseEstimator):
    """Tuned Lasso on a precomputed design matrix; ``X`` is the dictionary."""

    def __init__(self, c1=1.0, c2=0.1, c3=0.1, max_outer_iters=10,
                 ridge_shift=0.2, fixed_r_L=None):
        self.c1 = c1
        self.c2 = c2
        self.c3 = c3
        self.max_outer_iters = max_outer_iters
        self.ridge_shift = ridge_shift
        self.fixed_r_L = fixed_r_L

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        cfg = LassoMDConfig(c1=self.c1, c2=self.c2, c3=self.c3,
                            max_outer_iters=self.max_outer_iters,
                            ridge_shift=self.ridge_shift, fixed_r_L=self.fixed_r_L)
        self.tuning_ = fit_lasso_md(X, y[:, None] * X, cfg)
        self.coef_ = self.tuning_.coef
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return check_array(X) @ self.coef_
