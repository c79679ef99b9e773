"""Command-line front end.

    autodml estimate -c run.toml [--allow-flags]
    autodml gmm -c run.toml [--allow-flags]
    autodml simulate --design appendixA3 --reps 100 [--variant V ...]
    autodml report out/report.json

Run configurations are TOML files with dotted sections::

    [data]
    path = "ate.csv"          # relative paths resolve against the config file
    outcome = "y"
    treatment = "d"           # needed by ate, cross_average, att, decomposition
    cluster = "unit"          # optional; switches on clustered variance

    [model]
    functional = "ate"        # ate | cross_average | avg_derivative | transport
                              # | policy | aev_bound | regression
    dictionary = "split(d, 1 + poly(z1, z2, 2))"
    panel = false             # wrap in the correlated random effects dictionary

    [model.params]            # keyword arguments of the functional, e.g. wrt = "price"

    [crossfit]
    folds = 5
    seed = 0

    [riesz]
    learner = "lasso"         # lasso | dantzig | none
    # c1, c2, c3, max_outer_iters, ridge_shift, fixed_r_L, ... ; lambda for dantzig

    [regression]
    learner = "lasso"         # lasso | ols | external
    predictions = "preds.csv" # external only: row_id, point_tag, value

    [transform]
    kind = "att"              # att | elasticity | decomposition
    elasticity = "own_price"  # income | own_price | cross_price

    [output]
    report = "out/report.json"
    influence = "out/influence.csv"   # optional

The ``gmm`` command reads ``[data]``, ``[model].dictionary``, ``[crossfit]``,
``[riesz]``, ``[regression]`` and ``[output]`` plus a ``[gmm]`` section with
``model = "binary_choice"``, ``regressors``, ``instruments``, ``link``,
optional ``weight`` (matrix), ``bounds`` and ``iterate``.

Dictionary grammar: terms joined by ``+``; ``1`` is the constant, ``x`` or
``x^k`` a monomial, ``a*b`` a product, ``poly(a, b, k)`` every monomial of
total degree 1..k, ``interact(d, *)`` the product of ``d`` with every other
term, and ``split(d, terms)`` the arm-specific blocks ``d*t`` and ``(1-d)*t``.

Exit codes: 0 success, 2 invalid configuration or data, 3 a numerical flag was
raised (suppressed by ``--allow-flags``), 4 file input/output failure.
Reports are written to a temporary file and renamed, so a failed run never
leaves partial output.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import DataError, load_csv
from .dictionary import PanelDictionary, parse_dictionary
from .estimator import (FoldFailure, estimate, regression_decomposition,
                        transform_att, transform_elasticity, write_influence_csv)
from .functionals import make_functional
from .gmm import BinaryChoice, fit_gmm
from .lp import LPError
from .regression import load_prediction_table
from .riesz import LassoMDConfig
from .sim import TABLE_VARIANTS, run_simulate

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_FLAGGED = 3
EXIT_IO = 4

_LASSO_KEYS = {f.name for f in fields(LassoMDConfig)}
_NEEDS_TREATMENT = {"ate", "cross_average"}


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class OutputError(OSError):
    """A report file could not be written."""


# -- configuration ------------------------------------------------------------

def load_config(path) -> tuple[dict, Path]:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg, path.resolve().parent


def _section(cfg, name, required=False) -> dict:
    sec = cfg.get(name)
    if sec is None:
        if required:
            raise ConfigError(f"missing section [{name}]")
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return sec


def _require(sec, section, key):
    if key not in sec or sec[key] in ("", None):
        raise ConfigError(f"missing key {section}.{key}")
    return sec[key]


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def lasso_config(sec: dict, section: str) -> LassoMDConfig | None:
    keys = {k: v for k, v in sec.items() if k in _LASSO_KEYS}
    unknown = set(sec) - _LASSO_KEYS - {"learner", "lambda", "predictions"}
    if unknown:
        raise ConfigError(f"unknown key {section}.{sorted(unknown)[0]}")
    if not keys:
        return None
    try:
        return LassoMDConfig(**keys)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def _load_data(cfg, base):
    sec = _section(cfg, "data", required=True)
    path = _resolve(base, _require(sec, "data", "path"))
    schema = {k: sec[k] for k in ("outcome", "treatment", "cluster", "columns") if k in sec}
    _require(sec, "data", "outcome")
    return load_csv(path, schema), sec


def _dictionary(model, data):
    text = _require(model, "model", "dictionary")
    try:
        dic = parse_dictionary(text)
    except ValueError as exc:
        raise ConfigError(f"model.dictionary: {exc}") from exc
    missing = dic.columns - set(data.columns)
    if missing:
        raise ConfigError(f"model.dictionary uses column {sorted(missing)[0]!r} "
                          "that is not in the data")
    if model.get("panel", False):
        if data.cluster is None:
            raise ConfigError("model.panel needs data.cluster")
        dic = PanelDictionary(dic).fit(data)
    return dic


def _learners(cfg, base):
    rsec = _section(cfg, "riesz")
    gsec = _section(cfg, "regression")
    riesz = rsec.get("learner", "lasso")
    if riesz not in ("lasso", "dantzig", "none"):
        raise ConfigError(f"riesz.learner must be lasso, dantzig or none, not {riesz!r}")
    regression = gsec.get("learner", "lasso")
    if regression == "external":
        table = _resolve(base, _require(gsec, "regression", "predictions"))
        regression = load_prediction_table(table)
    elif regression not in ("lasso", "ols"):
        raise ConfigError(f"regression.learner must be lasso, ols or external, not {regression!r}")
    return {
        "riesz": riesz,
        "regression": regression,
        "riesz_config": lasso_config(rsec, "riesz"),
        "regression_config": lasso_config(gsec, "regression"),
        "dantzig_lambda": rsec.get("lambda"),
    }


def _crossfit(cfg):
    sec = _section(cfg, "crossfit")
    folds = sec.get("folds", 5)
    seed = sec.get("seed", 0)
    if not isinstance(folds, int) or folds < 2:
        raise ConfigError("crossfit.folds must be an integer >= 2")
    if not isinstance(seed, int):
        raise ConfigError("crossfit.seed must be an integer")
    return folds, seed


def _output(cfg, base):
    sec = _section(cfg, "output", required=True)
    report = _resolve(base, _require(sec, "output", "report"))
    influence = sec.get("influence")
    return report, (_resolve(base, influence) if influence else None)


# -- output -------------------------------------------------------------------

def _atomic_write(path: Path, writer) -> None:
    """Write via a sibling temporary file so ``path`` is all-or-nothing."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        os.close(fd)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror}") from exc
    try:
        writer(tmp)
        os.replace(tmp, path)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror}") from exc
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _write_text(path: Path, text: str) -> None:
    def writer(tmp):
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    _atomic_write(path, writer)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _line(label, theta, se) -> str:
    lo, hi = theta - 1.96 * se, theta + 1.96 * se
    return f"{label:<16s} {theta: .6g}  (SE {se:.6g})  95% CI [{lo:.6g}, {hi:.6g}]"


def render(doc: dict) -> str:
    """Human-readable summary of a report document."""
    kind = doc.get("kind")
    lines = []
    if kind == "run":
        lines.append(render(doc["estimate"]))
        if "transform" in doc:
            lines.append(render(doc["transform"]))
        return "\n".join(lines)
    if kind == "estimate":
        lines.append(_line(doc["functional"], doc["theta"], doc["std_error"]))
        lines.append(f"n = {doc['n']} ({doc['n_effective']} used), "
                     f"{'clustered' if doc['clustered'] else 'iid'} variance")
    elif kind == "transform":
        lines.append(_line(doc["name"], doc["theta_star"], doc["std_error"]))
    elif kind == "decomposition":
        lines.append(render(doc["cross_average"]))
        lines.append(render(doc["response"]))
        lines.append(render(doc["composition"]))
    elif kind == "gmm":
        for j, (t, s) in enumerate(zip(doc["theta"], doc["std_error"])):
            lines.append(_line(f"theta[{j}]", t, s))
        lines.append(f"n = {doc['n']}, objective {doc['objective']:.3g}, "
                     f"converged {doc['converged']}")
    else:
        raise ConfigError(f"not a report document (kind={kind!r})")
    flags = doc.get("flags")
    if flags:
        lines.append("flags: " + ", ".join(flags))
    return "\n".join(lines)


# -- commands -----------------------------------------------------------------

def run_estimate(cfg: dict, base: Path, allow_flags: bool = False, out=None) -> int:
    """Run one ``estimate`` configuration; returns the exit code."""
    out = out or sys.stdout
    model = _section(cfg, "model", required=True)
    kind = _require(model, "model", "functional")
    params = _section(model, "params")
    tsec = _section(cfg, "transform")
    transform = tsec.get("kind")
    if transform not in (None, "att", "elasticity", "decomposition"):
        raise ConfigError(f"transform.kind must be att, elasticity or decomposition, not {transform!r}")
    dsec = _section(cfg, "data", required=True)
    if (kind in _NEEDS_TREATMENT or transform in ("att", "decomposition")) \
            and not dsec.get("treatment"):
        raise ConfigError(f"missing key data.treatment (required by "
                          f"{'functional ' + kind if kind in _NEEDS_TREATMENT else 'transform ' + transform})")
    if transform == "att" and kind != "cross_average":
        raise ConfigError("transform.kind = 'att' needs model.functional = 'cross_average'")
    if transform == "elasticity" and kind != "avg_derivative":
        raise ConfigError("transform.kind = 'elasticity' needs model.functional = 'avg_derivative'")
    report_path, influence_path = _output(cfg, base)
    folds, seed = _crossfit(cfg)
    data, _ = _load_data(cfg, base)
    dic = _dictionary(model, data)
    try:
        functional = make_functional(kind, **params)
    except TypeError as exc:
        raise ConfigError(f"model.params: {exc}") from exc
    learners = _learners(cfg, base)

    if transform == "decomposition":
        dec = regression_decomposition(data, dic, folds, seed=seed, **learners)
        rep = dec.cross_average
        doc = dec.to_dict()
    else:
        rep = estimate(functional, dic, data, folds, seed=seed, **learners)
        doc = {"kind": "run", "estimate": rep.to_dict()}
        if transform == "att":
            doc["transform"] = transform_att(rep, data).to_dict()
        elif transform == "elasticity":
            doc["transform"] = transform_elasticity(
                rep, data, tsec.get("elasticity", "own_price")).to_dict()
    if not math.isfinite(rep.theta) or not math.isfinite(rep.std_error):
        raise FoldFailure("estimate is not finite")

    _write_text(report_path, _dumps(doc))
    if influence_path is not None:
        _atomic_write(influence_path, lambda tmp: write_influence_csv(rep, tmp))
    print(render(doc), file=out)
    print(f"report written to {report_path}", file=out)
    flags = sorted(set(rep.flags))
    if flags and not allow_flags:
        print(f"numerical flags raised: {', '.join(flags)} (use --allow-flags to accept)",
              file=sys.stderr)
        return EXIT_FLAGGED
    return EXIT_OK


def run_gmm(cfg: dict, base: Path, allow_flags: bool = False, out=None) -> int:
    """Run one ``gmm`` configuration; returns the exit code."""
    out = out or sys.stdout
    gsec = _section(cfg, "gmm", required=True)
    model_kind = gsec.get("model", "binary_choice")
    if model_kind != "binary_choice":
        raise ConfigError(f"gmm.model must be 'binary_choice', not {model_kind!r}")
    regressors = _require(gsec, "gmm", "regressors")
    instruments = _require(gsec, "gmm", "instruments")
    msec = _section(cfg, "model", required=True)
    report_path, _ = _output(cfg, base)
    folds, seed = _crossfit(cfg)
    if folds < 3:
        raise ConfigError("crossfit.folds must be >= 3 for the gmm double split")
    data, _ = _load_data(cfg, base)
    try:
        model = BinaryChoice(regressors, instruments, link=gsec.get("link", "probit"))
    except ValueError as exc:
        raise ConfigError(f"[gmm]: {exc}") from exc
    dic = _dictionary(msec, data)
    learners = _learners(cfg, base)
    if learners["riesz"] != "lasso":
        raise ConfigError("gmm supports riesz.learner = 'lasso' only")
    bounds = gsec.get("bounds")
    if bounds is not None:
        bounds = (np.full(model.q, -float(bounds)), np.full(model.q, float(bounds)))
    rep = fit_gmm(model, dic, data, folds, seed=seed, regression=learners["regression"],
                  riesz_config=learners["riesz_config"],
                  regression_config=learners["regression_config"],
                  weight=gsec.get("weight"), bounds=bounds,
                  iterate=bool(gsec.get("iterate", False)))
    doc = rep.to_dict()
    _write_text(report_path, _dumps(doc))
    print(render(doc), file=out)
    print(f"report written to {report_path}", file=out)
    flags = sorted(set(rep.flags))
    if flags and not allow_flags:
        print(f"numerical flags raised: {', '.join(flags)} (use --allow-flags to accept)",
              file=sys.stderr)
        return EXIT_FLAGGED
    return EXIT_OK


def _format_rows(rows) -> str:
    if rows[0]["design"] == "appendixA3":
        head = f"{'variant':<18s} {'reps':>5s} {'n':>5s} {'median MSE':>11s} {'mean MSE':>10s} {'R2':>7s}"
        body = [f"{r['variant']:<18s} {r['reps']:>5d} {r['n']:>5d} {r['mse_median']:>11.5f} "
                f"{r['mse_mean']:>10.5f} {r['r2_mean']:>7.3f}" for r in rows]
    else:
        head = f"{'variant':<10s} {'reps':>5s} {'n':>5s} {'mean':>9s} {'MC SE':>8s} {'mean SE':>8s} {'coverage':>9s}"
        body = [f"{r['variant']:<10s} {r['reps']:>5d} {r['n']:>5d} {r['theta_mean']:>9.4f} "
                f"{r['mc_se']:>8.4f} {r['se_mean']:>8.4f} {r['coverage']:>9.3f}" for r in rows]
    return "\n".join([head] + body)


def run_simulate_command(args, out=None) -> int:
    out = out or sys.stdout
    variants = (args.variant or []) + (args.row or [])
    rows = run_simulate(args.design, args.reps, variants or None, n=args.n,
                        seed=args.seed, workers=args.workers, folds=args.folds)
    print(_format_rows(rows), file=out)
    if args.output:
        _write_text(Path(args.output), _dumps(rows))
    return EXIT_OK


def run_report(path, out=None) -> int:
    out = out or sys.stdout
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not a JSON report ({exc.msg})") from exc
    print(render(doc), file=out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="autodml",
                                description="Automatic debiased machine learning")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("estimate", "estimate a linear functional from a CSV"),
                           ("gmm", "debiased GMM for a binary choice model")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("-c", "--config", required=True, help="TOML run configuration")
        sp.add_argument("--allow-flags", action="store_true",
                        help="exit 0 even when numerical flags are raised")
    sp = sub.add_parser("simulate", help="Monte Carlo validation suites")
    sp.add_argument("--design", required=True, choices=["appendixA3", "ate_logistic"])
    sp.add_argument("--reps", type=int, default=100)
    sp.add_argument("--variant", action="append",
                    help=f"table row; repeatable; one of {', '.join(TABLE_VARIANTS)}, fixed, final")
    sp.add_argument("--row", action="append", help="alias of --variant")
    sp.add_argument("--n", type=int, default=None, help="sample size per replication")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--workers", type=int, default=None,
                    help="worker processes (default: AUTODML_THREADS or 1)")
    sp.add_argument("--output", help="also write the summary rows as JSON")
    sp = sub.add_parser("report", help="print a saved report")
    sp.add_argument("file")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "estimate":
            cfg, base = load_config(args.config)
            return run_estimate(cfg, base, args.allow_flags)
        if args.command == "gmm":
            cfg, base = load_config(args.config)
            return run_gmm(cfg, base, args.allow_flags)
        if args.command == "simulate":
            return run_simulate_command(args)
        return run_report(args.file)
    except (ConfigError, DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FoldFailure, LPError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_FLAGGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
