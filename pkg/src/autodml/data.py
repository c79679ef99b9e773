"""Observation storage, CSV ingestion and cross-fitting fold plans.

Randomness throughout the package comes from numpy's Philox generator, a
64-bit counter-based bit generator whose output is fixed by the seed alone,
so fold plans and simulated designs reproduce across platforms.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "DataError",
    "Dataset",
    "FoldPlan",
    "load_csv",
    "write_csv",
    "make_folds",
    "philox",
    "replication_seed",
]


class DataError(ValueError):
    """Raised for malformed input data or inconsistent column roles."""


def philox(seed: int) -> np.random.Generator:
    """Return a Philox-backed generator for ``seed``."""
    return np.random.Generator(np.random.Philox(int(seed)))


def replication_seed(seed: int, rep: int) -> int:
    """Derive an independent 64-bit seed for replication ``rep``.

    Replication seeds depend only on ``(seed, rep)``, never on the order in
    which replications are scheduled.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(rep)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True, eq=False)
class Dataset:
    """Named float64 columns plus optional outcome/treatment roles and cluster ids.

    Rows are addressed by their integer position; that order never changes.
    """

    columns: Mapping[str, np.ndarray]
    outcome: str | None = None
    treatment: str | None = None
    cluster: np.ndarray | None = None
    _n: int = field(init=False, repr=False)

    def __post_init__(self):
        cols = {}
        n = None
        for name, values in self.columns.items():
            arr = np.asarray(values, dtype=np.float64)
            if arr.ndim != 1:
                raise DataError(f"column {name!r} must be one-dimensional")
            if n is None:
                n = arr.shape[0]
            elif arr.shape[0] != n:
                raise DataError(
                    f"column {name!r} has {arr.shape[0]} rows, expected {n}"
                )
            if not np.all(np.isfinite(arr)):
                bad = int(np.flatnonzero(~np.isfinite(arr))[0])
                raise DataError(f"non-finite value in column {name!r} at row {bad}")
            arr = arr.copy()
            arr.flags.writeable = False
            cols[name] = arr
        if n is None:
            raise DataError("dataset has no columns")
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "_n", n)
        for role in ("outcome", "treatment"):
            name = getattr(self, role)
            if name is not None and name not in cols:
                raise DataError(f"{role} column {name!r} not present")
        if self.cluster is not None:
            cl = np.asarray(self.cluster)
            if cl.shape != (n,):
                raise DataError("cluster ids must have one entry per row")
            if not np.issubdtype(cl.dtype, np.integer):
                if not np.all(np.isfinite(cl)) or np.any(cl != np.round(cl)):
                    raise DataError("cluster ids must be integers")
            cl = cl.astype(np.int64)
            cl.flags.writeable = False
            object.__setattr__(self, "cluster", cl)

    @property
    def n_rows(self) -> int:
        return self._n

    def __len__(self) -> int:
        return self._n

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise DataError(f"missing column {name!r}") from None

    @property
    def y(self) -> np.ndarray:
        if self.outcome is None:
            raise DataError("dataset has no outcome column")
        return self.columns[self.outcome]

    @property
    def d(self) -> np.ndarray:
        if self.treatment is None:
            raise DataError("dataset has no treatment column")
        return self.columns[self.treatment]

    @property
    def n_clusters(self) -> int:
        if self.cluster is None:
            return self._n
        return int(np.unique(self.cluster).size)

    def cluster_ids(self) -> np.ndarray:
        """Cluster id per row; each row is its own cluster when none are set."""
        if self.cluster is None:
            return np.arange(self._n, dtype=np.int64)
        return self.cluster

    def canonical_order(self) -> np.ndarray:
        """Stable row permutation that makes every cluster contiguous."""
        return np.argsort(self.cluster_ids(), kind="stable")

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            {k: v[rows] for k, v in self.columns.items()},
            outcome=self.outcome,
            treatment=self.treatment,
            cluster=None if self.cluster is None else self.cluster[rows],
        )

    def with_columns(self, **updates) -> "Dataset":
        cols = dict(self.columns)
        cols.update(updates)
        return Dataset(cols, outcome=self.outcome, treatment=self.treatment,
                       cluster=self.cluster)


def _read_rows(path: Path):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        body = [row for row in reader if row]
    return [h.strip() for h in header], body


def load_csv(path, schema: Mapping | None = None) -> Dataset:
    """Read a header-first CSV file into a :class:`Dataset`.

    ``schema`` maps roles to column names: ``outcome``, ``treatment`` and
    ``cluster`` name single columns, ``columns`` optionally restricts which
    other columns are loaded (all of them by default). Blank or non-numeric
    cells are rejected, never imputed.
    """
    schema = dict(schema or {})
    path = Path(path)
    header, body = _read_rows(path)
    if not body:
        raise DataError(f"{path}: empty file")
    cluster_col = schema.get("cluster")
    wanted = schema.get("columns")
    if wanted is None:
        wanted = [h for h in header if h != cluster_col]
    else:
        wanted = list(wanted)
        for role in ("outcome", "treatment"):
            if schema.get(role) and schema[role] not in wanted:
                wanted.append(schema[role])
    roles = [schema[r] for r in ("outcome", "treatment") if schema.get(r)]
    required = list(wanted) + roles + ([cluster_col] if cluster_col else [])
    for name in required:
        if name not in header:
            raise DataError(f"{path}: missing column {name!r}")
    index = {h: i for i, h in enumerate(header)}

    def parse(col):
        j = index[col]
        out = np.empty(len(body))
        for r, row in enumerate(body, start=1):
            cell = row[j].strip() if j < len(row) else ""
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"non-numeric cell at row {r}, column {col}") from None
            if not math.isfinite(v):
                raise DataError(f"non-numeric cell at row {r}, column {col}")
            out[r - 1] = v
        return out

    columns = {c: parse(c) for c in wanted}
    cluster = None
    if cluster_col:
        raw = parse(cluster_col)
        if np.any(raw != np.round(raw)):
            raise DataError(f"cluster column {cluster_col!r} must hold integers")
        cluster = raw.astype(np.int64)
    return Dataset(columns, outcome=schema.get("outcome"),
                   treatment=schema.get("treatment"), cluster=cluster)


def write_csv(data: Dataset, path, cluster_name: str = "cluster") -> None:
    """Write ``data`` so that :func:`load_csv` restores every value exactly."""
    names = list(data.columns)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names + ([cluster_name] if data.cluster is not None else []))
        cols = [data.columns[k] for k in names]
        for i in range(data.n_rows):
            row = [repr(float(c[i])) for c in cols]
            if data.cluster is not None:
                row.append(str(int(data.cluster[i])))
            w.writerow(row)


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """Assignment of every row to one of ``L`` folds (0-based fold labels)."""

    L: int
    assignment: np.ndarray
    seed: int

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64).copy()
        a.flags.writeable = False
        object.__setattr__(self, "assignment", a)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.L)

    def rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def complement(self, *folds: int) -> np.ndarray:
        return np.flatnonzero(~np.isin(self.assignment, folds))

    def relabel(self, perm: Sequence[int]) -> "FoldPlan":
        """Same partition with fold ``l`` renamed to ``perm[l]``."""
        perm = np.asarray(perm, dtype=np.int64)
        return FoldPlan(self.L, perm[self.assignment], self.seed)

    def __iter__(self) -> Iterable[np.ndarray]:
        return (self.rows(l) for l in range(self.L))


def make_folds(data: Dataset | int, L: int, seed: int = 0) -> FoldPlan:
    """Partition rows into ``L`` folds, keeping clusters whole.

    The balancing unit is the cluster when cluster ids are present, else the
    row. Units are shuffled by the seeded generator and dealt round-robin, so
    fold sizes differ by at most one unit.
    """
    if isinstance(data, Dataset):
        ids = data.cluster_ids()
        n_rows = data.n_rows
    else:
        n_rows = int(data)
        ids = np.arange(n_rows, dtype=np.int64)
    units, inverse = np.unique(ids, return_inverse=True)
    if not isinstance(L, (int, np.integer)) or L < 2 or L > units.size:
        raise DataError(
            f"fold count L={L} out of range: need 2 <= L <= {units.size}"
        )
    order = philox(seed).permutation(units.size)
    unit_fold = np.empty(units.size, dtype=np.int64)
    unit_fold[order] = np.arange(units.size) % L
    return FoldPlan(int(L), unit_fold[inverse.reshape(n_rows)], int(seed))
