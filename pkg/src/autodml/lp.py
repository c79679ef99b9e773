"""Dense two-phase tableau simplex for small linear programs.

Solves ``min c'x  s.t.  A x <= b,  x >= 0``. Pricing uses the most negative
reduced cost; after a degenerate pivot the next choice falls back to Bland's
smallest-index rule, which rules out cycling. The final basic solution is
recomputed from the original constraint matrix to shed tableau round-off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

__all__ = ["LPResult", "LPError", "simplex"]


class LPError(RuntimeError):
    pass


@dataclass
class LPResult:
    x: np.ndarray
    fun: float
    status: str
    nit: int
    basis: np.ndarray


@numba.njit(cache=True)
def _run(T, basis, allowed, tol, max_iter, nit):
    """Pivot until optimal. Returns (nit, status): 0 optimal, 1 unbounded, 2 limit."""
    m = T.shape[0] - 1
    width = T.shape[1] - 1
    degenerate = False
    while True:
        if nit >= max_iter:
            return nit, 2
        # entering column: most negative reduced cost, or Bland after degeneracy
        q = -1
        best = -tol
        for j in range(width):
            if allowed[j] and T[m, j] < -tol:
                if degenerate:
                    q = j
                    break
                if T[m, j] < best:
                    best = T[m, j]
                    q = j
        if q < 0:
            return nit, 0
        # leaving row: minimum ratio, ties to the smallest basic index
        r = -1
        ratio = np.inf
        for i in range(m):
            a = T[i, q]
            if a > tol:
                t = T[i, width] / a
                if r < 0 or t < ratio - tol * max(1.0, abs(ratio)):
                    r = i
                    ratio = t
                elif t <= ratio + tol * max(1.0, abs(ratio)) and basis[i] < basis[r]:
                    r = i
                    ratio = min(ratio, t)
        if r < 0:
            return nit, 1
        degenerate = ratio <= tol
        _pivot(T, r, q)
        basis[r] = q
        nit += 1


@numba.njit(cache=True)
def _pivot(T, r, q):
    rows, cols = T.shape
    piv = T[r, q]
    for k in range(cols):
        T[r, k] /= piv
    for i in range(rows):
        if i == r:
            continue
        f = T[i, q]
        if f != 0.0:
            for k in range(cols):
                T[i, k] -= f * T[r, k]


def _solve(T, basis, allowed, tol, max_iter, nit):
    nit, status = _run(T, basis, allowed, tol, max_iter, nit)
    if status == 1:
        raise LPError("linear program is unbounded")
    if status == 2:
        raise LPError(f"simplex exceeded {max_iter} iterations")
    return nit


def _warm_tableau(A, b, start, tol):
    """Tableau in canonical form for the basis ``start`` (no sign flips).

    Slack columns of rows outside the active set stay unit vectors, so only
    the structural columns in ``start`` need Gauss-Jordan pivots, restricted
    to the active rows. Returns ``None`` if the basis is singular or not
    primal feasible.
    """
    m, n = A.shape
    start = np.asarray(start, dtype=np.int64)
    if start.size != m or np.unique(start).size != m:
        return None
    structural = start[start < n]
    slack_rows = start[start >= n] - n
    active = np.setdiff1d(np.arange(m), slack_rows)
    if active.size != structural.size:
        return None
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = b
    basis = np.empty(m, dtype=np.int64)
    basis[slack_rows] = n + slack_rows
    free = list(active)
    for q in structural:
        cand = np.asarray(free)
        k = int(np.argmax(np.abs(T[cand, q])))
        if abs(T[cand[k], q]) <= tol:
            return None
        r = int(cand[k])
        _pivot(T, r, q)
        basis[r] = q
        free.pop(k)
    if np.any(T[:m, -1] < -tol * max(1.0, np.abs(b).max())):
        return None
    T[:m, -1] = np.maximum(T[:m, -1], 0.0)
    return T, basis


def simplex(c, A_ub, b_ub, tol: float = 1e-9, max_iter: int = 100_000,
            start=None) -> LPResult:
    """Minimize ``c'x`` subject to ``A_ub x <= b_ub`` and ``x >= 0``.

    ``start`` optionally names a basis (``len(b_ub)`` column indices, slack
    of row ``i`` being column ``n + i``) believed to be primal feasible;
    when it is, phase one is skipped. Otherwise the solver starts cold.
    """
    c = np.asarray(c, float)
    A = np.asarray(A_ub, float)
    b = np.asarray(b_ub, float)
    m, n = A.shape
    warm = None if start is None else _warm_tableau(A, b, start, tol)
    if warm is not None:
        T, basis = warm
        sign = np.ones(m)
        n_art = 0
        width = n + m
    else:
        sign = np.where(b < 0, -1.0, 1.0)
        n_art = int(np.sum(b < 0))
        width = n + m + n_art
        T = np.zeros((m + 1, width + 1))
        T[:m, :n] = A * sign[:, None]
        T[:m, n:n + m] = np.diag(sign)
        T[:m, -1] = b * sign
        basis = np.empty(m, dtype=np.int64)
        art_rows = np.flatnonzero(sign < 0)
        for k, r in enumerate(art_rows):
            T[r, n + m + k] = 1.0
            basis[r] = n + m + k
        slack_rows = np.flatnonzero(sign > 0)
        basis[slack_rows] = n + slack_rows

    nit = 0
    kept = np.arange(m)
    allowed = np.ones(width, dtype=bool)
    if n_art:
        T[-1, :] = -T[art_rows].sum(axis=0)
        T[-1, n + m:-1] = 0.0
        nit = _solve(T, basis, allowed, tol, max_iter, nit)
        if -T[-1, -1] > tol * max(1.0, np.abs(b).max()):
            raise LPError("linear program is infeasible")
        # drive remaining artificials out of the basis
        keep = np.ones(m, dtype=bool)
        for r in range(m):
            if basis[r] >= n + m:
                row = np.abs(T[r, :n + m])
                q = int(np.argmax(row))
                if row[q] > tol:
                    _pivot(T, r, q)
                    basis[r] = q
                else:
                    keep[r] = False
        allowed[n + m:] = False
        T = np.vstack([T[:-1][keep], T[-1:]])
        basis = basis[keep]
        kept = kept[keep]

    obj = np.zeros(width + 1)
    obj[:n] = c
    for r, j in enumerate(basis):
        if obj[j] != 0.0:
            obj -= obj[j] * T[r]
    T[-1] = obj
    nit = _solve(T, basis, allowed, tol, max_iter, nit)

    x_full = np.zeros(width)
    x_full[basis] = T[:-1, -1]
    # recompute the basic solution from the original equality system
    std = np.hstack([A * sign[:, None], np.diag(sign)])[kept]
    rhs = (b * sign)[kept]
    if np.all(basis < n + m):
        try:
            xb = np.linalg.solve(std[:, basis], rhs)
            if np.all(np.isfinite(xb)):
                x_full[:] = 0.0
                x_full[basis] = np.maximum(xb, 0.0)
        except np.linalg.LinAlgError:
            pass
    x = x_full[:n]
    return LPResult(x=x, fun=float(c @ x), status="optimal", nit=nit, basis=basis)

