"""Delimited-text datasets, standardisation and seeded train/test splits."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import make_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (n, d)
    targets: np.ndarray  # (n,)
    feature_mean: np.ndarray = None
    feature_scale: np.ndarray = None
    target_mean: float = 0.0
    target_scale: float = 1.0
    feature_names: tuple = field(default=())

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        targets = np.asarray(self.targets, dtype=float).reshape(-1)
        if inputs.shape[0] != targets.shape[0]:
            raise ValueError("inputs and targets disagree on the number of rows")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)
        d = inputs.shape[1]
        if self.feature_mean is None:
            object.__setattr__(self, "feature_mean", np.zeros(d))
        if self.feature_scale is None:
            object.__setattr__(self, "feature_scale", np.ones(d))

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]


class TableError(ValueError):
    pass


def _parse_cell(text, row, col):
    try:
        return float(text)
    except ValueError:
        raise TableError(f"unparseable cell {text!r} at row {row}, column {col}") from None


def load_table(path, target=-1, delimiter=",", header=None) -> Dataset:
    """Read a numeric delimited table.

    Parameters
    ----------
    target : int or str
        Target column index (negative allowed) or header name.
    header : bool or None
        Whether the first row holds column names; sniffed when None.

    Rows containing non-finite values are dropped with a warning. Row and
    column numbers in errors are 1-based positions in the file.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh, delimiter=delimiter) if r and any(c.strip() for c in r)]
    if not rows:
        raise TableError(f"{path} is empty")
    if header is None:
        try:
            [float(c) for c in rows[0]]
            header = False
        except ValueError:
            header = True
    names = [c.strip() for c in rows[0]] if header else [str(i) for i in range(len(rows[0]))]
    body = rows[1:] if header else rows
    offset = 2 if header else 1
    width = len(names)
    if isinstance(target, str) and not target.lstrip("-").isdigit():
        if target not in names:
            raise TableError(f"target column {target!r} not in header {names}")
        tcol = names.index(target)
    else:
        tcol = int(target) % width
    data = np.empty((len(body), width))
    for i, row in enumerate(body):
        if len(row) != width:
            raise TableError(f"row {i + offset} has {len(row)} cells, expected {width}")
        for j, cell in enumerate(row):
            data[i, j] = _parse_cell(cell.strip(), i + offset, j + 1)
    keep = np.all(np.isfinite(data), axis=1)
    dropped = int(np.sum(~keep))
    if dropped:
        log.warning("dropped %d row(s) with non-finite entries from %s", dropped, path)
    data = data[keep]
    features = [j for j in range(width) if j != tcol]
    return Dataset(data[:, features], data[:, tcol], feature_names=tuple(names[j] for j in features))


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.1
    seed: int = 0
    subsample: int | None = None

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")


def subsample(ds: Dataset, limit: int, seed: int) -> Dataset:
    if limit >= ds.n:
        return ds
    idx = np.sort(make_rng(seed, 5).permutation(ds.n)[:limit])
    return replace(ds, inputs=ds.inputs[idx], targets=ds.targets[idx])


def feature_stats(inputs):
    mean = inputs.mean(axis=0)
    scale = inputs.std(axis=0)
    constant = ~(scale > 0)
    if np.any(constant):
        log.warning("constant feature column(s) %s; scale clamped to 1", np.flatnonzero(constant).tolist())
        scale = np.where(constant, 1.0, scale)
    return mean, scale


def apply_standardisation(ds: Dataset, feature_mean, feature_scale, target_mean, target_scale) -> Dataset:
    return Dataset(
        (ds.inputs - feature_mean) / feature_scale,
        (ds.targets - target_mean) / target_scale,
        np.asarray(feature_mean),
        np.asarray(feature_scale),
        float(target_mean),
        float(target_scale),
        ds.feature_names,
    )


def standardise_and_split(ds: Dataset, spec: SplitSpec):
    """Shuffle, split and standardise with training-split statistics only."""
    if spec.subsample is not None:
        ds = subsample(ds, spec.subsample, spec.seed)
    n_train = math.ceil(round((1.0 - spec.test_fraction) * ds.n, 9))
    if n_train < 2 or ds.n - n_train < 1:
        raise ValueError(f"split of {ds.n} rows leaves fewer than 2 training or 1 test row")
    perm = make_rng(spec.seed, 6).permutation(ds.n)
    tr, te = perm[:n_train], perm[n_train:]
    fmean, fscale = feature_stats(ds.inputs[tr])
    tmean = float(ds.targets[tr].mean())
    tscale = float(ds.targets[tr].std())
    if not tscale > 0:
        log.warning("constant targets; scale clamped to 1")
        tscale = 1.0
    raw_train = replace(ds, inputs=ds.inputs[tr], targets=ds.targets[tr])
    raw_test = replace(ds, inputs=ds.inputs[te], targets=ds.targets[te])
    return (
        apply_standardisation(raw_train, fmean, fscale, tmean, tscale),
        apply_standardisation(raw_test, fmean, fscale, tmean, tscale),
    )


def write_table(path, inputs, targets, delimiter=",", names=None):
    """Write features plus a trailing target column with a header row."""
    inputs = np.atleast_2d(inputs)
    names = list(names) if names is not None else [f"x{i}" for i in range(inputs.shape[1])] + ["y"]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(names)
        for row, t in zip(inputs, targets):
            w.writerow([repr(float(v)) for v in row] + [repr(float(t))])


def synthetic_regression(n: int, d: int, seed: int, noise: float = 0.1):
    """Smooth nonlinear regression data for desk-scale runs."""
    rng = make_rng(seed, 7)
    X = rng.uniform(-2.0, 2.0, size=(n, d))
    w = rng.standard_normal((d, 3)) / np.sqrt(d)
    Z = X @ w
    f = np.sin(2.0 * Z[:, 0]) + 0.5 * np.cos(3.0 * Z[:, 1]) + 0.3 * Z[:, 2] ** 2
    y = f + noise * rng.standard_normal(n)
    return X, y
