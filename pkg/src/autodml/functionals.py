"""Linear functionals ``m(w, gamma)`` of a regression and their sample moments.

A functional is applied to an *evaluator*: anything exposing
``at(data, rows, override, tag)`` and ``partial(data, wrt, rows, override, tag)``.
Dictionaries return one column per basis term, so applying a functional to a
dictionary yields the per-row vectors ``m(W_i, b)``; fitted regressions return
one value per row, giving ``m(W_i, gamma_hat)``. The ``tag`` names the
evaluation point (``plain``, ``d1``, ``d0``, ``deriv``, ``transport``) for
regressions supplied as external prediction tables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .data import DataError, Dataset

__all__ = [
    "MomentFunctional",
    "ATE",
    "CrossAverage",
    "AvgDerivative",
    "Transport",
    "PolicyEffect",
    "AEVBound",
    "RegressionMoment",
    "MomentVector",
    "GramMatrix",
    "moment_rows",
    "moment_of_dictionary",
    "moment_of_regression",
    "gram",
    "make_functional",
]


def _rows(data, rows):
    return np.arange(data.n_rows) if rows is None else np.asarray(rows)


def _scale(weights, values):
    # per-row weights against (n,) or (n, p) evaluations
    return weights[:, None] * values if values.ndim == 2 else weights * values


class MomentFunctional:
    """Base class; subclasses implement :meth:`apply`."""

    name = "functional"
    tags: tuple[str, ...] = ("plain",)
    supports_external = True

    def required_columns(self) -> set[str]:
        return set()

    def validate(self, data: Dataset, rows=None) -> None:
        for col in self.required_columns():
            if col not in data:
                raise DataError(f"{self.name}: missing column {col!r}")

    def apply(self, ev, data: Dataset, rows=None) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self):
        params = ", ".join(f"{k}={v!r}" for k, v in vars(self).items())
        return f"{type(self).__name__}({params})"


class _BinaryTreatment(MomentFunctional):
    def __init__(self, treatment: str | None = None):
        self.treatment = treatment

    def _d(self, data):
        return self.treatment or data.treatment

    def required_columns(self):
        return {self.treatment} if self.treatment else set()

    def validate(self, data, rows=None):
        super().validate(data, rows)
        name = self._d(data)
        if name is None:
            raise DataError(f"{self.name}: no treatment column configured")
        d = data[name][_rows(data, rows)]
        if not np.all((d == 0) | (d == 1)):
            raise DataError(f"{self.name}: treatment {name!r} must be 0/1")
        if d.size and (d.min() == d.max()):
            raise DataError("no variation in treatment")


class ATE(_BinaryTreatment):
    """``gamma(1, z) - gamma(0, z)``."""

    name = "ate"
    tags = ("plain", "d1", "d0")

    def apply(self, ev, data, rows=None):
        d = self._d(data)
        return (ev.at(data, rows, {d: 1.0}, tag="d1")
                - ev.at(data, rows, {d: 0.0}, tag="d0"))


class CrossAverage(_BinaryTreatment):
    """``d * gamma(0, z)``; the building block of ATT and decompositions."""

    name = "cross_average"
    tags = ("plain", "d0")

    def apply(self, ev, data, rows=None):
        d = self._d(data)
        dv = data[d][_rows(data, rows)]
        return _scale(dv, ev.at(data, rows, {d: 0.0}, tag="d0"))


class AvgDerivative(MomentFunctional):
    """``omega(x) * d gamma(x) / d wrt``; ``omega`` defaults to 1."""

    name = "avg_derivative"
    tags = ("plain", "deriv")

    def __init__(self, wrt: str, weight: str | None = None):
        self.wrt = wrt
        self.weight = weight

    def required_columns(self):
        return {self.wrt} | ({self.weight} if self.weight else set())

    def apply(self, ev, data, rows=None):
        vals = ev.partial(data, self.wrt, rows, tag="deriv")
        if self.weight:
            vals = _scale(data[self.weight][_rows(data, rows)], vals)
        return vals


class Transport(MomentFunctional):
    """``gamma(t(x)) - gamma(x)`` for a column-wise map ``t``.

    ``mapping`` sends column names to a callable applied to that column, or to
    a number that is added to it (a pure shift).
    """

    name = "transport"
    tags = ("plain", "transport")

    def __init__(self, mapping: Mapping[str, float | Callable]):
        self.mapping = dict(mapping)

    def required_columns(self):
        return set(self.mapping)

    def _override(self):
        out = {}
        for col, t in self.mapping.items():
            out[col] = t if callable(t) else (lambda x, s=float(t): x + s)
        return out

    def apply(self, ev, data, rows=None):
        return (ev.at(data, rows, self._override(), tag="transport")
                - ev.at(data, rows, None, tag="plain"))


class PolicyEffect(MomentFunctional):
    """``sum_k w_k gamma(x_k)`` for a signed point-mass measure ``F1 - F0``.

    The value does not depend on the observation, so every row receives the
    same vector.
    """

    name = "policy"
    supports_external = False

    def __init__(self, points: Mapping[str, np.ndarray], weights):
        self.points = {k: np.atleast_1d(np.asarray(v, float)) for k, v in points.items()}
        self.weights = np.asarray(weights, float)
        sizes = {v.size for v in self.points.values()}
        if len(sizes) != 1 or sizes.pop() != self.weights.size:
            raise ValueError("policy points and weights must have matching lengths")
        if abs(self.weights.sum()) > 1e-10:
            raise ValueError("policy weights must sum to 0 (difference of two distributions)")

    def required_columns(self):
        return set(self.points)

    def apply(self, ev, data, rows=None):
        n = _rows(data, rows).size
        value = self.weights @ ev.at(Dataset(self.points), None, tag="policy")
        return np.broadcast_to(value, (n,) + np.shape(value)).copy()


class AEVBound(MomentFunctional):
    """Bound on average equivalent variation for a price change ``low -> high``.

    ``omega(z) * int_low^high (z1/u) gamma(u, z) exp(-kappa (u - low)) du`` by
    Gauss-Legendre quadrature of fixed ``order``.
    """

    name = "aev_bound"
    supports_external = False

    def __init__(self, price: str, income: str, low: float, high: float,
                 kappa: float = 0.0, weight: str | None = None, order: int = 32):
        if not low < high:
            raise ValueError("AEV bound needs low < high")
        if not np.isfinite(kappa):
            raise ValueError("kappa must be finite")
        if order < 2:
            raise ValueError("quadrature order must be >= 2")
        self.price, self.income = price, income
        self.low, self.high, self.kappa = float(low), float(high), float(kappa)
        self.weight, self.order = weight, int(order)

    def required_columns(self):
        return {self.price, self.income} | ({self.weight} if self.weight else set())

    def apply(self, ev, data, rows=None):
        idx = _rows(data, rows)
        x, w = np.polynomial.legendre.leggauss(self.order)
        half = 0.5 * (self.high - self.low)
        nodes = self.low + half * (x + 1.0)
        w = w * half * np.exp(-self.kappa * (nodes - self.low)) / nodes
        total = None
        for u, wk in zip(nodes, w):
            term = wk * ev.at(data, rows, {self.price: u})
            total = term if total is None else total + term
        scale = data[self.income][idx]
        if self.weight:
            scale = scale * data[self.weight][idx]
        return _scale(scale, total)


class RegressionMoment(MomentFunctional):
    """``y * gamma(x)``; its minimum-distance Lasso is the Lasso regression."""

    name = "regression"

    def validate(self, data, rows=None):
        if data.outcome is None:
            raise DataError("regression: dataset has no outcome column")

    def apply(self, ev, data, rows=None):
        y = data.y[_rows(data, rows)]
        return _scale(y, ev.at(data, rows, None, tag="plain"))


@dataclass(frozen=True)
class MomentVector:
    values: np.ndarray
    n_used: int

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True)
class GramMatrix:
    values: np.ndarray
    n_used: int

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def moment_rows(f: MomentFunctional, dictionary, data: Dataset, rows=None) -> np.ndarray:
    """``(n_rows, p)`` matrix whose row ``i`` is ``m(W_i, b)``."""
    f.validate(data, rows)
    out = np.asarray(f.apply(dictionary, data, rows), dtype=float)
    if out.ndim == 1:
        out = out[:, None]
    return out


def moment_of_dictionary(f: MomentFunctional, dictionary, data: Dataset, rows=None) -> MomentVector:
    """``M_hat = mean_i m(W_i, b)`` over ``rows``."""
    mr = moment_rows(f, dictionary, data, rows)
    if mr.shape[0] == 0:
        raise DataError("moment over an empty row set")
    return MomentVector(mr.mean(axis=0), mr.shape[0])


def moment_of_regression(f: MomentFunctional, fit, data: Dataset, rows=None) -> np.ndarray:
    """Per-row plug-in values ``m(W_i, gamma_hat)``."""
    f.validate(data, rows)
    if getattr(fit, "kind", None) == "external" and not f.supports_external:
        raise DataError(f"{f.name} cannot use an external prediction table")
    return np.asarray(f.apply(fit, data, rows), dtype=float)


def gram(dictionary, data: Dataset, rows=None) -> GramMatrix:
    """``G_hat = mean_i b(X_i) b(X_i)'`` over ``rows``."""
    B = dictionary.at(data, rows)
    if B.shape[0] == 0:
        raise DataError("Gram matrix over an empty row set")
    G = B.T @ B / B.shape[0]
    return GramMatrix(0.5 * (G + G.T), B.shape[0])


def make_functional(kind: str, **params) -> MomentFunctional:
    """Construct a functional from its config name and parameters."""
    kinds = {
        "ate": ATE,
        "cross_average": CrossAverage,
        "avg_derivative": AvgDerivative,
        "transport": Transport,
        "policy": PolicyEffect,
        "aev_bound": AEVBound,
        "regression": RegressionMoment,
    }
    if kind not in kinds:
        raise ValueError(f"unknown functional {kind!r}; choose from {sorted(kinds)}")
    return kinds[kind](**params)
