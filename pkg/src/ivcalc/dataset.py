"""Observational samples of (Y, X, Z), CSV ingestion and grouped statistics.

Three regimes are supported:

* ``DiscreteDataset``: categorical X in {0..n} (0 is the baseline level) and
  categorical Z in {0..m-1}.
* ``MixedDataset``: categorical X, scalar Z in [0, 1].
* ``ContinuousDataset``: real X (N x n) and real Z (N x m) inside bounded
  rectangles.

Datasets are immutable; the arrays are stored read-only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import DatasetError

Kind = Literal["discrete", "mixed", "continuous"]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


def _as_codes(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.size == 0:
        return np.zeros(0, dtype=np.int64)
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise DatasetError(f"{name} must hold integer category codes")
    return arr.astype(np.int64)


@dataclass(frozen=True)
class DiscreteDataset:
    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    n: int
    m: int

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        x = _as_codes(self.x, "x").reshape(-1)
        z = _as_codes(self.z, "z").reshape(-1)
        if not (len(y) == len(x) == len(z)):
            raise DatasetError(f"length mismatch: y={len(y)}, x={len(x)}, z={len(z)}")
        if self.n < 1:
            raise DatasetError("need at least one non-baseline X level (n >= 1)")
        if self.m < 2:
            raise DatasetError("need at least two instrument levels (m >= 2)")
        if len(x) and (x.min() < 0 or x.max() > self.n):
            bad = int(np.flatnonzero((x < 0) | (x > self.n))[0])
            raise DatasetError(f"x code {x[bad]} outside 0..{self.n} at sample {bad}")
        if len(z) and (z.min() < 0 or z.max() > self.m - 1):
            bad = int(np.flatnonzero((z < 0) | (z > self.m - 1))[0])
            raise DatasetError(f"z code {z[bad]} outside 0..{self.m - 1} at sample {bad}")
        if not np.all(np.isfinite(y)):
            raise DatasetError("y contains non-finite values")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "z", _frozen(z))

    def __len__(self) -> int:
        return len(self.y)

    kind = "discrete"

    def take(self, idx) -> "DiscreteDataset":
        return DiscreteDataset(self.y[idx], self.x[idx], self.z[idx], self.n, self.m)


@dataclass(frozen=True)
class MixedDataset:
    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    n: int

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        x = _as_codes(self.x, "x").reshape(-1)
        z = np.asarray(self.z, dtype=float).reshape(-1)
        if not (len(y) == len(x) == len(z)):
            raise DatasetError(f"length mismatch: y={len(y)}, x={len(x)}, z={len(z)}")
        if self.n < 1:
            raise DatasetError("need at least one non-baseline X level (n >= 1)")
        if len(x) and (x.min() < 0 or x.max() > self.n):
            raise DatasetError(f"x codes must lie in 0..{self.n}")
        if len(z) and (not np.all(np.isfinite(z)) or z.min() < 0.0 or z.max() > 1.0):
            raise DatasetError("z must lie in [0, 1]")
        if not np.all(np.isfinite(y)):
            raise DatasetError("y contains non-finite values")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "z", _frozen(z))

    def __len__(self) -> int:
        return len(self.y)

    kind = "mixed"

    def take(self, idx) -> "MixedDataset":
        return MixedDataset(self.y[idx], self.x[idx], self.z[idx], self.n)


def _bounds(b, ncols: int, name: str) -> tuple[tuple[float, float], ...]:
    b = tuple((float(lo), float(hi)) for lo, hi in b)
    if len(b) != ncols:
        raise DatasetError(f"{name} has {len(b)} intervals for {ncols} columns")
    for lo, hi in b:
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
            raise DatasetError(f"{name} must be finite closed intervals, got {(lo, hi)}")
    return b


@dataclass(frozen=True)
class ContinuousDataset:
    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    x_bounds: tuple = None
    z_bounds: tuple = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float)
        z = np.asarray(self.z, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if z.ndim == 1:
            z = z[:, None]
        if not (len(y) == len(x) == len(z)):
            raise DatasetError(f"row count mismatch: y={len(y)}, x={len(x)}, z={len(z)}")
        for name, a in (("y", y), ("x", x), ("z", z)):
            if not np.all(np.isfinite(a)):
                raise DatasetError(f"{name} contains non-finite values")
        xb = self.x_bounds if self.x_bounds is not None else _observed_bounds(x)
        zb = self.z_bounds if self.z_bounds is not None else _observed_bounds(z)
        xb = _bounds(xb, x.shape[1], "x_bounds")
        zb = _bounds(zb, z.shape[1], "z_bounds")
        for name, a, bb in (("x", x, xb), ("z", z, zb)):
            for j, (lo, hi) in enumerate(bb):
                out = (a[:, j] < lo) | (a[:, j] > hi)
                if np.any(out):
                    i = int(np.flatnonzero(out)[0])
                    raise DatasetError(f"{name}{j + 1}={a[i, j]!r} at sample {i} outside [{lo}, {hi}]")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "z", _frozen(z))
        object.__setattr__(self, "x_bounds", xb)
        object.__setattr__(self, "z_bounds", zb)

    def __len__(self) -> int:
        return len(self.y)

    kind = "continuous"

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> int:
        return self.z.shape[1]

    def take(self, idx) -> "ContinuousDataset":
        return ContinuousDataset(self.y[idx], self.x[idx], self.z[idx], self.x_bounds, self.z_bounds)


def _observed_bounds(a: np.ndarray):
    if len(a) == 0:
        return [(0.0, 0.0)] * a.shape[1]
    return list(zip(a.min(axis=0), a.max(axis=0)))


Dataset = DiscreteDataset | MixedDataset | ContinuousDataset


# --------------------------------------------------------------------------
# grouped statistics


@dataclass(frozen=True)
class GroupStats:
    """Per-instrument-level summaries of a discrete dataset.

    Attributes
    ----------
    cond_mean_y : (m,) sample mean of Y within each Z level (NaN if empty)
    cond_prob_x : (m, n+1) frequency of each X level within each Z level
    group_counts : (m,) observations (or total weight) per Z level
    cond_var_y : (m,) within-level sample variance of Y (NaN below 2 obs)
    empty : (m,) True where a level has no observations
    """

    cond_mean_y: np.ndarray
    cond_prob_x: np.ndarray
    group_counts: np.ndarray
    cond_var_y: np.ndarray
    empty: np.ndarray = field(default=None)

    @property
    def m(self) -> int:
        return len(self.group_counts)

    @property
    def n(self) -> int:
        return self.cond_prob_x.shape[1] - 1


def group_stats(d: DiscreteDataset, weights: np.ndarray | None = None) -> GroupStats:
    """Conditional means of Y and frequencies of X for each level of Z.

    ``weights`` are nonnegative case weights (bootstrap resampling counts);
    omitted means one per row.
    """
    if len(d) == 0:
        raise DatasetError("group_stats needs at least one observation")
    m, k = d.m, d.n + 1
    w = np.ones(len(d)) if weights is None else np.asarray(weights, dtype=float)
    counts = np.bincount(d.z, weights=w, minlength=m)
    sy = np.bincount(d.z, weights=w * d.y, minlength=m)
    cells = np.bincount(d.z * k + d.x, weights=w, minlength=m * k).reshape(m, k)
    empty = counts <= 0
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(empty, np.nan, sy / np.where(empty, 1.0, counts))
        prob = np.where(empty[:, None], np.nan, cells / np.where(empty, 1.0, counts)[:, None])
        dev = d.y - np.nan_to_num(mean)[d.z]
        ss = np.bincount(d.z, weights=w * dev * dev, minlength=m)
        var = np.where(counts > 1, ss / np.maximum(counts - 1, 1), np.nan)
    if weights is None:
        counts = counts.astype(np.int64)
    return GroupStats(mean, prob, counts, var, empty)


# --------------------------------------------------------------------------
# CSV ingestion


@dataclass(frozen=True)
class DatasetSchema:
    """Which dataset variant a CSV holds.

    ``n``/``m`` may be left as None to infer them from the data (continuous
    files always infer them from the header).
    """

    kind: Kind
    n: int | None = None
    m: int | None = None
    x_bounds: Sequence | None = None
    z_bounds: Sequence | None = None


def _expected_header(schema: DatasetSchema, header: list[str]) -> tuple[int, int]:
    if schema.kind in ("discrete", "mixed"):
        if header != ["y", "x", "z"]:
            raise DatasetError(f"header must be y,x,z for {schema.kind} data, got {','.join(header)}", row=1)
        return 1, 1
    xs = [h for h in header if h.startswith("x")]
    zs = [h for h in header if h.startswith("z")]
    n, m = len(xs), len(zs)
    want = ["y"] + [f"x{i + 1}" for i in range(n)] + [f"z{i + 1}" for i in range(m)]
    if header != want or n == 0 or m == 0:
        raise DatasetError("continuous header must be y,x1..xn,z1..zm; got " + ",".join(header), row=1)
    if schema.n is not None and schema.n != n:
        raise DatasetError(f"schema declares n={schema.n} but header has {n} x columns", row=1)
    if schema.m is not None and schema.m != m:
        raise DatasetError(f"schema declares m={schema.m} but header has {m} z columns", row=1)
    return n, m


def _parse_code(cell: str, row: int, name: str) -> int:
    try:
        return int(cell)
    except ValueError:
        try:
            v = float(cell)
        except ValueError:
            raise DatasetError(f"cannot parse {name}={cell!r} as an integer code", row=row) from None
        if v != int(v):
            raise DatasetError(f"{name}={cell!r} is not an integer code", row=row)
        return int(v)


def _parse_real(cell: str, row: int, name: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DatasetError(f"cannot parse {name}={cell!r} as a number", row=row) from None
    if not np.isfinite(v):
        raise DatasetError(f"{name}={cell!r} is not finite", row=row)
    return v


def load_csv(path: str | Path, schema: DatasetSchema) -> Dataset:
    """Read a header-first, comma-delimited file into a validated dataset."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError("file is empty; a header row is required", row=1) from None
        n_x, n_z = _expected_header(schema, header)
        width = len(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise DatasetError(f"expected {width} fields, found {len(row)}", row=lineno)
            rows.append((lineno, [c.strip() for c in row]))

    if schema.kind == "continuous":
        data = np.empty((len(rows), width))
        for i, (lineno, cells) in enumerate(rows):
            for j, c in enumerate(cells):
                data[i, j] = _parse_real(c, lineno, header[j])
        y, x, z = data[:, 0], data[:, 1:1 + n_x], data[:, 1 + n_x:]
        for name, a, b in (("x", x, schema.x_bounds), ("z", z, schema.z_bounds)):
            if b is None:
                continue
            for j, (lo, hi) in enumerate(b):
                out = np.flatnonzero((a[:, j] < lo) | (a[:, j] > hi))
                if len(out):
                    raise DatasetError(f"{name}{j + 1} outside [{lo}, {hi}]", row=rows[out[0]][0])
        return ContinuousDataset(y, x, z, schema.x_bounds, schema.z_bounds)

    y = np.empty(len(rows))
    x = np.empty(len(rows), dtype=np.int64)
    zc = np.empty(len(rows), dtype=np.int64)
    zr = np.empty(len(rows))
    for i, (lineno, (cy, cx, cz)) in enumerate(rows):
        y[i] = _parse_real(cy, lineno, "y")
        x[i] = _parse_code(cx, lineno, "x")
        if schema.kind == "discrete":
            zc[i] = _parse_code(cz, lineno, "z")
        else:
            zr[i] = _parse_real(cz, lineno, "z")
    n = schema.n if schema.n is not None else max(1, int(x.max()) if len(x) else 1)
    for i, (lineno, _) in enumerate(rows):
        if not 0 <= x[i] <= n:
            raise DatasetError(f"x code {x[i]} outside 0..{n}", row=lineno)
    if schema.kind == "discrete":
        m = schema.m if schema.m is not None else max(2, int(zc.max()) + 1 if len(zc) else 2)
        for i, (lineno, _) in enumerate(rows):
            if not 0 <= zc[i] <= m - 1:
                raise DatasetError(f"z code {zc[i]} outside 0..{m - 1}", row=lineno)
        return DiscreteDataset(y, x, zc, n, m)
    for i, (lineno, _) in enumerate(rows):
        if not 0.0 <= zr[i] <= 1.0:
            raise DatasetError(f"z={zr[i]!r} outside [0, 1]", row=lineno)
    return MixedDataset(y, x, zr, n)


def save_csv(d: Dataset, path: str | Path) -> None:
    """Write a dataset in the format :func:`load_csv` reads.

    Reals use ``repr`` (shortest round-trip form) so files are byte-stable.
    """
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if isinstance(d, ContinuousDataset):
            w.writerow(["y"] + [f"x{i + 1}" for i in range(d.n)] + [f"z{i + 1}" for i in range(d.m)])
            for yi, xi, zi in zip(d.y, d.x, d.z):
                w.writerow([repr(float(yi))] + [repr(float(v)) for v in xi] + [repr(float(v)) for v in zi])
            return
        w.writerow(["y", "x", "z"])
        ztxt = (lambda v: str(int(v))) if isinstance(d, DiscreteDataset) else (lambda v: repr(float(v)))
        for yi, xi, zi in zip(d.y, d.x, d.z):
            w.writerow([repr(float(yi)), str(int(xi)), ztxt(zi)])


def schema_of(d: Dataset) -> DatasetSchema:
    if isinstance(d, DiscreteDataset):
        return DatasetSchema("discrete", d.n, d.m)
    if isinstance(d, MixedDataset):
        return DatasetSchema("mixed", d.n)
    return DatasetSchema("continuous", d.n, d.m, d.x_bounds, d.z_bounds)
