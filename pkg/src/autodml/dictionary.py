"""Polynomial dictionaries ``b(x)`` with analytic partials and counterfactual evaluation.

A dictionary is an ordered list of :class:`Term` objects. Every term is a
product of column powers, optionally multiplied by a treatment arm indicator
``d`` or ``1 - d``. Restricting terms to this family keeps every partial
derivative exact.

Dictionaries can be written as pattern strings::

    1 + d + poly(z1, z2, 2) + interact(d, *)
    split(d, 1 + poly(z, 3))

``poly(c1, ..., ck, deg)`` expands to all monomials of total degree 1..deg,
``a*b^2`` is a product term, ``interact(d, *)`` multiplies ``d`` into every
earlier non-constant term that does not already involve ``d``,
``interact(d, <terms>)`` multiplies ``d`` into the listed terms, and
``split(d, <terms>)`` builds the arm-split block ``[d*q(z), (1-d)*q(z)]``.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .data import DataError, Dataset

__all__ = [
    "Term",
    "Dictionary",
    "PanelDictionary",
    "constant",
    "monomial",
    "product",
    "treatment_block",
    "parse_dictionary",
    "fully_interacted",
]


@dataclass(frozen=True)
class Term:
    """Product of column powers, optionally restricted to one treatment arm.

    ``powers`` holds ``(column, power)`` pairs sorted by column; an empty tuple
    is the constant. ``arm`` is ``1`` for ``d * inner``, ``0`` for
    ``(1 - d) * inner`` and ``None`` otherwise.
    """

    powers: tuple[tuple[str, int], ...] = ()
    arm: int | None = None
    treatment: str | None = None

    def __post_init__(self):
        merged: dict[str, int] = {}
        for col, k in self.powers:
            if int(k) != k or k < 1:
                raise ValueError(f"power of {col!r} must be an integer >= 1, got {k}")
            merged[col] = merged.get(col, 0) + int(k)
        object.__setattr__(self, "powers", tuple(sorted(merged.items())))
        if self.arm is not None:
            if self.arm not in (0, 1):
                raise ValueError("arm must be 0 or 1")
            if not self.treatment:
                raise ValueError("treatment_block needs a treatment column")
            if self.treatment in merged:
                raise ValueError("treatment_block inner term cannot involve the treatment")

    @property
    def kind(self) -> str:
        if self.arm is not None:
            return "treatment_block"
        if not self.powers:
            return "constant"
        if len(self.powers) == 1:
            return "monomial"
        return "product"

    @property
    def columns(self) -> set[str]:
        cols = {c for c, _ in self.powers}
        if self.treatment:
            cols.add(self.treatment)
        return cols

    @property
    def is_constant(self) -> bool:
        return not self.powers and self.arm is None

    @property
    def label(self) -> str:
        inner = "*".join(c if k == 1 else f"{c}^{k}" for c, k in self.powers) or "1"
        if self.arm is None:
            return inner
        arm = self.treatment if self.arm == 1 else f"(1-{self.treatment})"
        return f"{arm}:[{inner}]"

    def __str__(self):
        return self.label

    def times(self, col: str, k: int = 1) -> "Term":
        return Term(self.powers + ((col, k),), self.arm, self.treatment)

    def _arm_factor(self, cols):
        d = cols[self.treatment]
        return d if self.arm == 1 else 1.0 - d

    def evaluate(self, cols: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        out = np.ones(n)
        for c, k in self.powers:
            out = out * (cols[c] if k == 1 else cols[c] ** k)
        if self.arm is not None:
            out = out * self._arm_factor(cols)
        return out

    def partial(self, cols: Mapping[str, np.ndarray], n: int, wrt: str) -> np.ndarray:
        if self.arm is not None and wrt == self.treatment:
            raise ValueError(
                f"term {self.label} is not differentiable in treatment {wrt!r}"
            )
        k = dict(self.powers).get(wrt, 0)
        if k == 0:
            return np.zeros(n)
        out = np.full(n, float(k))
        for c, kc in self.powers:
            e = kc - 1 if c == wrt else kc
            if e:
                out = out * (cols[c] if e == 1 else cols[c] ** e)
        if self.arm is not None:
            out = out * self._arm_factor(cols)
        return out


def constant() -> Term:
    return Term()


def monomial(column: str, power: int = 1) -> Term:
    return Term(((column, power),))


def product(*terms: Term) -> Term:
    powers: tuple = ()
    for t in terms:
        if t.arm is not None:
            raise ValueError("product factors must be plain monomials")
        powers += t.powers
    return Term(powers)


def treatment_block(arm: int, inner: Term, treatment: str) -> Term:
    if inner.arm is not None:
        raise ValueError("nested treatment blocks are not supported")
    return Term(inner.powers, arm, treatment)


Override = Mapping[str, "float | np.ndarray | Callable[[np.ndarray], np.ndarray]"]


def _frame(data, rows, override):
    """Column arrays restricted to ``rows`` with ``override`` applied."""
    if isinstance(data, Mapping):
        data = Dataset({k: np.atleast_1d(np.asarray(v, float)) for k, v in data.items()})
    if rows is None:
        cols = dict(data.columns)
        n = data.n_rows
    else:
        rows = np.asarray(rows)
        cols = {k: v[rows] for k, v in data.columns.items()}
        n = rows.size
    if override:
        for col, val in override.items():
            if col not in cols:
                raise DataError(f"unknown override column {col!r}")
            if callable(val):
                new = np.asarray(val(cols[col]), dtype=float)
            else:
                new = np.asarray(val, dtype=float)
            cols[col] = np.broadcast_to(new, (n,))
    return cols, n


class Dictionary:
    """Ordered dictionary of basis terms; column order equals coefficient order.

    Evaluation methods return an ``(n_rows, p)`` matrix. The ``tag`` argument
    of :meth:`at` and :meth:`partial` is ignored here; it exists so that
    dictionaries and fitted regressions share one evaluation protocol.
    """

    def __init__(self, terms: Sequence[Term], bound: Sequence[float] | None = None):
        terms = list(terms)
        if not terms:
            raise ValueError("dictionary needs at least one term")
        labels = [t.label for t in terms]
        dup = {l for l in labels if labels.count(l) > 1}
        if dup:
            raise ValueError(f"duplicate dictionary terms: {sorted(dup)}")
        treat = {t.treatment for t in terms if t.treatment}
        if len(treat) > 1:
            raise ValueError("arm-split terms must share one treatment column")
        self.terms = terms
        self.treatment = treat.pop() if treat else None
        self.bound = None if bound is None else np.asarray(bound, float)

    @property
    def p(self) -> int:
        return len(self.terms)

    def __len__(self) -> int:
        return len(self.terms)

    @property
    def labels(self) -> list[str]:
        return [t.label for t in self.terms]

    @property
    def columns(self) -> set[str]:
        return set().union(*(t.columns for t in self.terms))

    @property
    def has_intercept(self) -> bool:
        return self.terms[0].is_constant

    def __repr__(self):
        return f"Dictionary({' + '.join(self.labels)})"

    def _check(self, cols):
        missing = self.columns - set(cols)
        if missing:
            raise DataError(f"missing column {sorted(missing)[0]!r}")

    # sklearn-style hooks so a dictionary can sit where a transformer would
    def fit(self, data=None):
        return self

    def transform(self, data):
        return self.at(data)

    def at(self, data, rows=None, override: Override | None = None, tag=None) -> np.ndarray:
        cols, n = _frame(data, rows, override)
        self._check(cols)
        return np.column_stack([t.evaluate(cols, n) for t in self.terms])

    def partial(self, data, wrt: str, rows=None, override: Override | None = None,
                tag=None) -> np.ndarray:
        cols, n = _frame(data, rows, override)
        self._check(cols)
        return np.column_stack([t.partial(cols, n, wrt) for t in self.terms])

    evaluate = at

    def eval_row(self, row: Mapping[str, float]) -> np.ndarray:
        return self.at(row)[0]

    def eval_partial(self, row: Mapping[str, float], wrt: str) -> np.ndarray:
        return self.partial(row, wrt)[0]

    def eval_counterfactual(self, row: Mapping[str, float], override: Override) -> np.ndarray:
        return self.at(row, override=override)[0]

    def sup_norm(self, data, rows=None) -> np.ndarray:
        """Per-term ``max |b_j|`` on the sample (diagnostic only)."""
        return np.max(np.abs(self.at(data, rows)), axis=0)


def fully_interacted(treatment: str, covariates: Sequence[str], degree: int = 1) -> Dictionary:
    """The ``(1, D, q(Z), D*q(Z))`` dictionary with ``q`` polynomial of ``degree``."""
    covs = ", ".join(covariates)
    return parse_dictionary(f"1 + {treatment} + poly({covs}, {degree}) + interact({treatment}, *)")


class PanelDictionary:
    """Correlated random effects dictionary for clustered panels.

    For row ``(i, t)`` the terms are ``b1(X_it)`` followed by
    ``b1(X_it) kron (H_i - mean H)``, where ``H_i`` is the within-cluster time
    average of ``b1`` and the mean weights every cluster equally. ``H`` is
    computed once by :meth:`fit` and held fixed in counterfactual and partial
    evaluations.
    """

    def __init__(self, base: Dictionary):
        self.base = base
        self.treatment = base.treatment

    @property
    def K(self) -> int:
        return self.base.p

    @property
    def p(self) -> int:
        return self.K + self.K * self.K

    def __len__(self):
        return self.p

    @property
    def columns(self):
        return self.base.columns

    @property
    def has_intercept(self) -> bool:
        return self.base.has_intercept

    @property
    def labels(self) -> list[str]:
        bl = self.base.labels
        return bl + [f"{a}*H[{b}]" for a in bl for b in bl]

    def fit(self, data: Dataset) -> "PanelDictionary":
        if data.cluster is None:
            raise DataError("panel dictionary needs a cluster column")
        b1 = self.base.at(data)
        ids, inverse = np.unique(data.cluster, return_inverse=True)
        inverse = inverse.reshape(-1)
        counts = np.bincount(inverse)
        h = np.zeros((ids.size, self.K))
        np.add.at(h, inverse, b1)
        h /= counts[:, None]
        self.cluster_means_ = h
        self.grand_mean_ = h.mean(axis=0)
        self.centered_ = h[inverse] - self.grand_mean_
        self.n_fit_ = data.n_rows
        return self

    def _centered(self, data, rows):
        if not hasattr(self, "centered_"):
            raise RuntimeError("PanelDictionary must be fit before evaluation")
        if data.n_rows != self.n_fit_:
            raise DataError("panel dictionary was fit on a different dataset")
        return self.centered_ if rows is None else self.centered_[np.asarray(rows)]

    def _expand(self, b1, hc):
        n = b1.shape[0]
        cross = (b1[:, :, None] * hc[:, None, :]).reshape(n, self.K * self.K)
        return np.hstack([b1, cross])

    def at(self, data, rows=None, override=None, tag=None) -> np.ndarray:
        return self._expand(self.base.at(data, rows, override), self._centered(data, rows))

    def partial(self, data, wrt, rows=None, override=None, tag=None) -> np.ndarray:
        return self._expand(self.base.partial(data, wrt, rows, override),
                            self._centered(data, rows))

    def transform(self, data):
        return self.at(data)

    evaluate = at


def build_panel_dictionary(data: Dataset, base: Dictionary):
    """Fit a :class:`PanelDictionary` on ``data`` and evaluate it on every row."""
    pd = PanelDictionary(base).fit(data)
    return pd, pd.at(data)


# -- pattern grammar ---------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(\d+)|([A-Za-z_][A-Za-z0-9_.]*)|(.))")


def _tokenize(text):
    out = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            break
        num, ident, sym = m.groups()
        if num is not None:
            out.append(("int", int(num)))
        elif ident is not None:
            out.append(("id", ident))
        elif sym is not None and not sym.isspace():
            out.append(("sym", sym))
        pos = m.end()
    return out


class _Parser:
    def __init__(self, text):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def error(self, msg):
        raise ValueError(f"bad dictionary pattern {self.text!r}: {msg}")

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None)

    def take(self, kind=None, value=None):
        tok = self.peek()
        if tok[0] is None or (kind and tok[0] != kind) or (value is not None and tok[1] != value):
            self.error(f"expected {value or kind}, got {tok[1]!r}")
        self.i += 1
        return tok[1]

    def parse(self):
        terms = self.terms_()
        if self.peek()[0] is not None:
            self.error(f"unexpected {self.peek()[1]!r}")
        return terms

    def terms_(self):
        out: list[Term] = []
        self.item(out)
        while self.peek() == ("sym", "+"):
            self.take()
            self.item(out)
        return out

    def item(self, out):
        kind, val = self.peek()
        if kind == "int":
            if self.take() != 1:
                self.error("only the constant 1 may appear as a number")
            out.append(constant())
            return
        if kind != "id":
            self.error(f"unexpected {val!r}")
        if val in ("poly", "interact", "split") and self.toks[self.i + 1:self.i + 2] == [("sym", "(")]:
            getattr(self, val)(out)
            return
        out.append(self.product_())

    def product_(self):
        t = Term()
        while True:
            col = self.take("id")
            k = 1
            if self.peek() == ("sym", "^"):
                self.take()
                k = self.take("int")
            t = t.times(col, k)
            if self.peek() != ("sym", "*"):
                return t
            self.take()

    def poly(self, out):
        self.take("id", "poly")
        self.take("sym", "(")
        args = []
        while True:
            kind, val = self.peek()
            args.append(self.take())
            if self.peek() == ("sym", ")"):
                break
            self.take("sym", ",")
        self.take("sym", ")")
        if len(args) < 2 or not isinstance(args[-1], int):
            self.error("poly needs columns followed by a degree")
        cols, deg = args[:-1], args[-1]
        if any(not isinstance(c, str) for c in cols):
            self.error("poly columns must be names")
        for total in range(1, deg + 1):
            for combo in itertools.combinations_with_replacement(cols, total):
                out.append(Term(tuple((c, 1) for c in combo)))

    def interact(self, out):
        self.take("id", "interact")
        self.take("sym", "(")
        d = self.take("id")
        self.take("sym", ",")
        if self.peek() == ("sym", "*"):
            self.take()
            base = [t for t in out if not t.is_constant and d not in t.columns]
        else:
            base = self.terms_()
        self.take("sym", ")")
        for t in base:
            if t.arm is not None:
                self.error("cannot interact arm-split terms")
            out.append(t.times(d))

    def split(self, out):
        self.take("id", "split")
        self.take("sym", "(")
        d = self.take("id")
        self.take("sym", ",")
        inner = self.terms_()
        self.take("sym", ")")
        for arm in (1, 0):
            out.extend(treatment_block(arm, t, d) for t in inner)


def parse_dictionary(pattern: str) -> Dictionary:
    """Build a :class:`Dictionary` from a pattern string.

    Duplicate terms keep their first position; a constant term, when present,
    is moved to the front so that it receives the intercept penalty.
    """
    terms = _Parser(pattern).parse()
    seen, unique = set(), []
    for t in terms:
        if t.label not in seen:
            seen.add(t.label)
            unique.append(t)
    unique.sort(key=lambda t: not t.is_constant)
    return Dictionary(unique)
