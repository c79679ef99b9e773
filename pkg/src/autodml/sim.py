"""Synthetic designs with known truths, brute-force oracles and Monte Carlo runs.

Designs
-------
``appendixA3``
    ``Y = X' rho0 + eps`` with ``X = (1, X_1..X_100)``, ``X_j`` and ``eps``
    standard normal, ``rho0 = (1, 1, 1, 0, ..., 0)``.
``ate_logistic``
    Binary treatment with logistic propensity (clipped to ``[0.05, 0.95]``)
    and a linear outcome regression; the ATE is the treatment coefficient.
``riesz_sparse``
    Standard normal covariates and the average derivative in ``x1``; by
    Gaussian integration by parts the representer is exactly ``x1``.
``binary_choice``
    Choice probability ``Phi(beta0 + beta1 v + delta [gamma(1,z) - gamma(0,z)])``
    with uniform ``v`` and ``z2`` and instruments ``(1, v, z2)``.
``panel_slopes``
    Clustered panel whose unit effects correlate with prices through their
    cluster means; the price slope and elasticity are known.
"""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, ndtr
from sklearn.linear_model import Lasso

from .data import Dataset, philox, replication_seed
from .dictionary import Dictionary, parse_dictionary
from .estimator import estimate
from .functionals import ATE
from .regression import FunctionFit
from .riesz import LassoMDConfig, fit_lasso_md

__all__ = [
    "DesignSpec",
    "Truth",
    "DESIGNS",
    "generate",
    "gaussian_moment",
    "riesz_sparse_M",
    "oracle_dantzig_small",
    "oracle_bootstrap",
    "TABLE_VARIANTS",
    "appendix_variant",
    "run_simulate",
]


@dataclass(frozen=True)
class DesignSpec:
    kind: str
    n: int = 100
    seed: int = 0
    params: dict = field(default_factory=dict)


@dataclass
class Truth:
    gamma: FunctionFit | None = None
    alpha: FunctionFit | None = None
    theta: float | np.ndarray | None = None
    extras: dict = field(default_factory=dict)


# -- appendixA3 ----------------------------------------------------------------

def _appendix_a3(n, rng, p=101, support=3):
    X = rng.standard_normal((n, p - 1))
    eps = rng.standard_normal(n)
    rho0 = np.zeros(p)
    rho0[:support] = 1.0
    y = rho0[0] + X @ rho0[1:] + eps
    cols = {f"x{j}": X[:, j - 1] for j in range(1, p)}
    cols["y"] = y
    data = Dataset(cols, outcome="y")
    names = [f"x{j}" for j in range(1, p)]
    dictionary = parse_dictionary(" + ".join(["1"] + names))

    def gamma(c):
        return rho0[0] + sum(rho0[j] * c[f"x{j}"] for j in range(1, p) if rho0[j])

    g = FunctionFit(gamma)
    # for m(w, gamma) = y gamma(x) the representer is the regression itself
    return data, Truth(g, g, None, {"rho0": rho0, "dictionary": dictionary})


# -- ate_logistic --------------------------------------------------------------

def _ate_logistic(n, rng, k=3, tau=1.0, intercept=0.5, beta=None, kappa=None,
                  clip=(0.05, 0.95)):
    beta = np.array([1.0, 0.5, -0.5, 0.25, 0.0][:k] if beta is None else beta, float)
    kappa = np.array([0.8, -0.6, 0.4, 0.2, 0.0][:k] if kappa is None else kappa, float)
    Z = rng.standard_normal((n, k))
    names = [f"z{j}" for j in range(1, k + 1)]

    def pscore(c, scale=1.0):
        lin = sum(kappa[j] * c[names[j]] for j in range(k)) * scale
        return np.clip(expit(lin), clip[0], clip[1])

    cols = {nm: Z[:, j] for j, nm in enumerate(names)}
    pi = pscore(cols)
    d = (rng.random(n) < pi).astype(float)
    y = intercept + tau * d + Z @ beta + rng.standard_normal(n)
    cols.update(d=d, y=y)
    data = Dataset(cols, outcome="y", treatment="d")

    def gamma_fn(scale=1.0):
        def g(c):
            return intercept + scale * (tau * c["d"] + sum(beta[j] * c[names[j]] for j in range(k)))
        return g

    def alpha_fn(scale=1.0):
        def a(c):
            p_ = pscore(c, scale)
            return c["d"] / p_ - (1.0 - c["d"]) / (1.0 - p_)
        return a

    extras = {
        "pscore": pscore,
        "gamma_scaled": lambda s: FunctionFit(gamma_fn(s)),
        "alpha_scaled": lambda s: FunctionFit(alpha_fn(s)),
        "dictionary": parse_dictionary(f"split(d, 1 + poly({', '.join(names)}, 2))"),
    }
    return data, Truth(FunctionFit(gamma_fn()), FunctionFit(alpha_fn()), float(tau), extras)


# -- riesz_sparse --------------------------------------------------------------

def gaussian_moment(k: int) -> float:
    """``E[Z^k]`` for standard normal ``Z``."""
    if k % 2:
        return 0.0
    return float(np.prod(np.arange(k - 1, 0, -2))) if k else 1.0


def riesz_sparse_M(dictionary: Dictionary, wrt: str = "x1") -> np.ndarray:
    """Closed-form ``E[d b_j / d wrt]`` under independent standard normals."""
    out = np.zeros(dictionary.p)
    for j, t in enumerate(dictionary.terms):
        powers = dict(t.powers)
        a = powers.get(wrt, 0)
        if a == 0:
            continue
        val = a * gaussian_moment(a - 1)
        for col, k in powers.items():
            if col != wrt:
                val *= gaussian_moment(k)
        out[j] = val
    return out


def _riesz_sparse(n, rng, k=5, degree=2):
    X = rng.standard_normal((n, k))
    names = [f"x{j}" for j in range(1, k + 1)]
    cols = {nm: X[:, j] for j, nm in enumerate(names)}

    def gamma(c):
        return c["x1"] + 0.5 * c["x1"] * c["x2"] + c["x2"] ** 2 + 0.5 * c["x3"]

    def dgamma(c, wrt):
        if wrt == "x1":
            return 1.0 + 0.5 * c["x2"]
        if wrt == "x2":
            return 0.5 * c["x1"] + 2.0 * c["x2"]
        if wrt == "x3":
            return np.full(c["x3"].shape, 0.5)
        return np.zeros(c[names[0]].shape)

    cols["y"] = gamma(cols) + rng.standard_normal(n)
    data = Dataset(cols, outcome="y")
    dictionary = parse_dictionary(f"1 + poly({', '.join(names)}, {degree})")
    rho0 = np.zeros(dictionary.p)
    rho0[dictionary.labels.index("x1")] = 1.0
    extras = {"dictionary": dictionary, "rho0": rho0, "wrt": "x1",
              "M": riesz_sparse_M(dictionary, "x1")}
    return data, Truth(FunctionFit(gamma, dgamma), FunctionFit(lambda c: c["x1"]), 1.0, extras)


# -- binary_choice -------------------------------------------------------------

def _binary_choice(n, rng, beta=(-0.5, 1.0), delta=1.0, link="probit"):
    v = rng.uniform(-1.0, 1.0, n)
    z2 = rng.uniform(-1.0, 1.0, n)

    def gamma(c):
        return 0.5 * c["z2"] + c["d"] * (1.0 + c["z2"])

    diff = 1.0 + z2
    index = beta[0] + beta[1] * v + delta * diff
    prob = ndtr(index) if link == "probit" else expit(index)
    d = (rng.random(n) < prob).astype(float)
    y = gamma({"z2": z2, "d": d}) + rng.standard_normal(n)
    data = Dataset({"v": v, "z2": z2, "d": d, "y": y}, outcome="y", treatment="d")
    extras = {
        "dictionary": parse_dictionary("1 + d + poly(v, z2, 2) + interact(d, *)"),
        "regressors": ["1", "v"],
        "instruments": ["1", "v", "z2"],
        "link": link,
    }
    return data, Truth(FunctionFit(gamma), None, np.array([*beta, delta], float), extras)


# -- panel_slopes --------------------------------------------------------------

def _panel_slopes(n, rng, T=4, slope_price=-1.0, slope_income=0.5, loading=0.8,
                  balanced=True):
    """``n`` is the number of clusters; each has ``T`` periods (2..T if unbalanced)."""
    sizes = np.full(n, T) if balanced else rng.integers(2, T + 1, n)
    cl = np.repeat(np.arange(n), sizes)
    N = cl.size
    a = rng.standard_normal(n)
    price = 1.0 + 0.7 * a[cl] + 0.5 * rng.standard_normal(N)
    income = 1.0 + 0.5 * rng.standard_normal(N)
    effect = loading * a[cl]
    y = 2.0 + slope_price * price + slope_income * income + effect + 0.5 * rng.standard_normal(N)
    data = Dataset({"price": price, "income": income, "y": y}, outcome="y", cluster=cl)
    mean_y = 2.0 + slope_price * 1.0 + slope_income * 1.0
    extras = {
        "base": parse_dictionary("1 + price + income"),
        "wrt": "price",
        "mean_y": mean_y,
        "elasticity_own_price": slope_price / mean_y - 1.0,
        "elasticity_income": slope_income / mean_y - 1.0,
        "slopes": {"price": slope_price, "income": slope_income},
    }
    return data, Truth(None, None, float(slope_price), extras)


DESIGNS: dict[str, Callable] = {
    "appendixA3": _appendix_a3,
    "ate_logistic": _ate_logistic,
    "riesz_sparse": _riesz_sparse,
    "binary_choice": _binary_choice,
    "panel_slopes": _panel_slopes,
}


def generate(spec: DesignSpec) -> tuple[Dataset, Truth]:
    """Draw one dataset from ``spec``; identical specs give identical data."""
    if spec.kind not in DESIGNS:
        raise ValueError(f"unknown design {spec.kind!r}; choose from {sorted(DESIGNS)}")
    return DESIGNS[spec.kind](spec.n, philox(spec.seed), **spec.params)


# -- oracles -------------------------------------------------------------------

def oracle_dantzig_small(M, G, lambda_d: float, tol: float = 1e-9):
    """Exact minimum of ``|rho|_1`` over ``|M - G rho|_inf <= lambda_d``.

    The optimum sits at a vertex of the feasible set cut by the coordinate
    hyperplanes ``rho_j = 0``. Every choice of ``p`` hyperplanes among the
    ``2p`` constraint faces and ``p`` coordinate planes is solved, infeasible
    or singular choices are discarded, and the smallest ``|rho|_1`` wins.
    """
    M = np.asarray(M, float)
    G = np.atleast_2d(np.asarray(G, float))
    p = M.size
    if p > 6:
        raise ValueError("vertex enumeration is limited to p <= 6")
    faces_A = np.vstack([G, G, np.eye(p)])
    faces_b = np.concatenate([M + lambda_d, M - lambda_d, np.zeros(p)])
    combos = np.array(list(itertools.combinations(range(3 * p), p)))
    A = faces_A[combos]
    b = faces_b[combos]
    det = np.linalg.det(A)
    ok = np.abs(det) > 1e-12
    rho = np.linalg.solve(A[ok], b[ok][..., None])[..., 0]
    viol = np.max(np.abs(M[None, :] - rho @ G.T), axis=1) - lambda_d
    feas = viol <= tol * max(1.0, lambda_d)
    if not feas.any():
        raise ValueError("no feasible vertex found")
    l1 = np.abs(rho[feas]).sum(axis=1)
    k = int(np.argmin(l1))
    return rho[feas][k], float(l1[k])


def oracle_bootstrap(statistic: Callable[[Dataset], float], data: Dataset,
                     reps: int = 1000, seed: int = 0) -> float:
    """Standard deviation of ``statistic`` over cluster (or row) resamples.

    Whole clusters are drawn with replacement. Each resampled row keeps the
    id of its source cluster, so copies of one unit fall in one fold.
    """
    rng = philox(seed)
    ids = data.cluster_ids()
    units, inverse = np.unique(ids, return_inverse=True)
    inverse = inverse.reshape(-1)
    members = [np.flatnonzero(inverse == u) for u in range(units.size)] \
        if data.cluster is not None else None
    stats = np.empty(reps)
    for b in range(reps):
        draw = rng.integers(0, units.size, units.size)
        if members is None:
            rows = draw
            new_ids = draw
        else:
            rows = np.concatenate([members[u] for u in draw])
            new_ids = np.concatenate([np.full(members[u].size, u) for u in draw])
        sample = Dataset({k: v[rows] for k, v in data.columns.items()},
                         outcome=data.outcome, treatment=data.treatment, cluster=new_ids)
        stats[b] = statistic(sample)
    return float(np.std(stats, ddof=1)) if reps > 1 else 0.0


# -- the tuning table ----------------------------------------------------------

TABLE_VARIANTS = (
    "lasso",
    "generalized_lasso",
    "theoretical_r_L",
    "normalization",
    "iteration_cold",
    "iteration_warm",
    "max_iteration",
    "ridge",
)

_VARIANT_ALIASES = {"final": "ridge", "fixed": "lasso"}

# each row adds one technique to the previous one
_VARIANT_CONFIG = {
    "generalized_lasso": LassoMDConfig(fixed_r_L=0.5, c3=1.0, normalize=False, ridge_shift=0.0),
    "theoretical_r_L": LassoMDConfig(normalize=False, ridge_shift=0.0),
    "normalization": LassoMDConfig(max_outer_iters=1, ridge_shift=0.0),
    "iteration_cold": LassoMDConfig(max_outer_iters=100, warm_start=False, ridge_shift=0.0),
    "iteration_warm": LassoMDConfig(max_outer_iters=100, ridge_shift=0.0),
    "max_iteration": LassoMDConfig(max_outer_iters=10, ridge_shift=0.0),
    "ridge": LassoMDConfig(),
}


def appendix_variant(name: str, B: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Coefficients of one row of the tuning table on design matrix ``B``.

    ``lasso`` is the textbook Lasso at ``r_L = 0.5`` solved by scikit-learn
    (its objective is half the minimum-distance one); every other row goes
    through :func:`fit_lasso_md` with ``m(w, b) = y b(x)``.
    """
    name = _VARIANT_ALIASES.get(name, name)
    if name == "lasso":
        model = Lasso(alpha=0.5, fit_intercept=False, tol=1e-12, max_iter=100_000)
        return model.fit(B, y).coef_
    if name not in _VARIANT_CONFIG:
        raise ValueError(f"unknown variant {name!r}; choose from {list(TABLE_VARIANTS)}")
    return fit_lasso_md(B, y[:, None] * B, _VARIANT_CONFIG[name]).coef


def _a3_rep(args):
    seed, rep, n, variants = args
    s = replication_seed(seed, rep)
    data, truth = generate(DesignSpec("appendixA3", n, s))
    test, _ = generate(DesignSpec("appendixA3", n, replication_seed(s, 1)))
    dic = truth.extras["dictionary"]
    rho0 = truth.extras["rho0"]
    B, Bt = dic.at(data), dic.at(test)
    out = {}
    for v in variants:
        coef = appendix_variant(v, B, data.y)
        resid = test.y - Bt @ coef
        r2 = 1.0 - np.sum(resid ** 2) / np.sum((test.y - test.y.mean()) ** 2)
        # squared error averaged over the coefficients
        out[v] = (float(np.mean((coef - rho0) ** 2)), float(r2))
    return out


def _ate_rep(args):
    seed, rep, n, variants, L = args
    s = replication_seed(seed, rep)
    data, truth = generate(DesignSpec("ate_logistic", n, s))
    rep_ = estimate(ATE(), truth.extras["dictionary"], data, L, seed=s)
    lo, hi = rep_.confint()
    return {"ate": (rep_.theta, rep_.std_error, float(lo <= truth.theta <= hi))}


def _workers(workers):
    if workers is None:
        workers = int(os.environ.get("AUTODML_THREADS", "1") or 1)
    return max(1, workers)


def _map(fn, jobs, workers):
    if workers == 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def run_simulate(design: str = "appendixA3", reps: int = 100, variants=None,
                 n: int | None = None, seed: int = 0, workers: int | None = None,
                 folds: int = 5) -> list[dict]:
    """Monte Carlo summary, one dict per variant.

    ``appendixA3`` reports mean and median coefficient MSE and hold-out R^2
    for each requested table row. ``ate_logistic`` reports the mean
    estimate, its Monte Carlo standard error and CI coverage.
    Replication ``r`` always uses ``replication_seed(seed, r)``.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    workers = _workers(workers)
    if design == "appendixA3":
        variants = [_VARIANT_ALIASES.get(v, v) for v in (variants or TABLE_VARIANTS)]
        for v in variants:
            if v not in TABLE_VARIANTS:
                raise ValueError(f"unknown variant {v!r}; choose from {list(TABLE_VARIANTS)}")
        n = n or 100
        results = _map(_a3_rep, [(seed, r, n, variants) for r in range(reps)], workers)
        rows = []
        for v in variants:
            mse = np.array([res[v][0] for res in results])
            r2 = np.array([res[v][1] for res in results])
            rows.append({"design": design, "variant": v, "reps": reps, "n": n,
                         "mse_mean": float(mse.mean()), "mse_median": float(np.median(mse)),
                         "r2_mean": float(r2.mean())})
        return rows
    if design == "ate_logistic":
        n = n or 1000
        results = _map(_ate_rep, [(seed, r, n, None, folds) for r in range(reps)], workers)
        th = np.array([res["ate"][0] for res in results])
        se = np.array([res["ate"][1] for res in results])
        cov = np.array([res["ate"][2] for res in results])
        return [{"design": design, "variant": "ate", "reps": reps, "n": n,
                 "theta_mean": float(th.mean()),
                 "mc_se": float(th.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0,
                 "se_mean": float(se.mean()), "coverage": float(cov.mean())}]
    raise ValueError(f"simulate supports appendixA3 and ate_logistic, not {design!r}")
