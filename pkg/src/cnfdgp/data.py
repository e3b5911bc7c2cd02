"""CSV ingestion, train/test splitting, standardization and synthetic data."""
from __future__ import annotations

import csv
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import SeededRng

log = logging.getLogger(__name__)

MISSING = {"", "na", "nan", "null", "?"}


class DataError(ValueError):
    code = "data_error"


class ParseError(DataError):
    code = "parse_error"


class EmptyDataset(DataError):
    code = "empty_dataset"


class TooFewRows(DataError):
    code = "too_few_rows"


class SchemaMismatch(DataError):
    code = "schema_mismatch"


@dataclass
class Standardizer:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    @classmethod
    def fit(cls, X, y):
        x_std = X.std(0)
        y_std = float(y.std())
        return cls(X.mean(0), np.where(x_std > 0, x_std, 1.0), float(y.mean()), y_std if y_std > 0 else 1.0)

    def transform(self, X, y=None):
        Xs = (X - self.x_mean) / self.x_std
        if y is None:
            return Xs
        return Xs, (y - self.y_mean) / self.y_std

    def to_dict(self):
        return {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                "y_mean": self.y_mean, "y_std": self.y_std}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["x_mean"], dtype=float), np.asarray(d["x_std"], dtype=float),
                   float(d["y_mean"]), float(d["y_std"]))


@dataclass
class Dataset:
    """Raw-scale inputs ``X`` (N x D) and targets ``y`` (N,).

    ``stats`` is set once the dataset is split; it always comes from the
    training portion.
    """

    X: np.ndarray
    y: np.ndarray
    feature_names: list[str]
    target_name: str = "y"
    stats: Standardizer | None = field(default=None, repr=False)

    def __len__(self):
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    def standardized(self):
        if self.stats is None:
            raise ValueError("dataset has no standardization statistics; split it first")
        return self.stats.transform(self.X, self.y)

    def to_csv(self, path):
        rows = [",".join(self.feature_names + [self.target_name])]
        for x, t in zip(self.X, self.y):
            rows.append(",".join(repr(float(v)) for v in (*x, t)))
        atomic_write(path, "\n".join(rows) + "\n")


def atomic_write(path, text: str):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def ingest_csv(path, target_column: str | None = None, drop_constant: bool = True) -> Dataset:
    """Read a headed, comma-separated numeric file.

    The target is the named column, or the last one. Rows with missing cells
    are dropped (the count is logged); constant feature columns are dropped
    with a warning. Any other non-numeric cell raises :class:`ParseError`.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyDataset(f"{path}: file is empty") from None
        rows, dropped = [], 0
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {lineno} has {len(row)} fields, header has {len(header)}")
            vals, missing = [], False
            for col, cell in zip(header, row):
                c = cell.strip()
                if c.lower() in MISSING:
                    missing = True
                    break
                try:
                    v = float(c)
                except ValueError:
                    raise ParseError(f"{path}: row {lineno}, column {col!r}: not a number: {cell!r}") from None
                if not math.isfinite(v):
                    raise ParseError(f"{path}: row {lineno}, column {col!r}: non-finite value {cell!r}")
                vals.append(v)
            if missing:
                dropped += 1
                continue
            rows.append(vals)
    if dropped:
        log.warning("%s: dropped %d row(s) with missing values", path, dropped)
    if not rows:
        raise EmptyDataset(f"{path}: no complete data rows")
    data = np.asarray(rows, dtype=np.float64)
    if target_column is None or target_column == "last":
        t = len(header) - 1
    elif target_column in header:
        t = header.index(target_column)
    else:
        raise DataError(f"{path}: no column named {target_column!r}")
    keep = [j for j in range(len(header)) if j != t]
    X = data[:, keep]
    names = [header[j] for j in keep]
    if drop_constant and len(rows) > 1:
        const = [j for j in range(X.shape[1]) if np.all(X[:, j] == X[0, j])]
        for j in const:
            log.warning("%s: dropping constant column %r", path, names[j])
        if const:
            X = np.delete(X, const, axis=1)
            names = [n for j, n in enumerate(names) if j not in const]
    if X.shape[1] == 0:
        raise EmptyDataset(f"{path}: no usable feature columns")
    return Dataset(X, data[:, t], names, header[t])


def split(dataset: Dataset, fraction: float = 0.9, seed: int = 0):
    """Seeded random train/test split; both halves get the training statistics."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    N = len(dataset)
    if N < 2:
        raise TooFewRows(f"need at least 2 rows to split, got {N}")
    n_train = min(max(int(round(fraction * N)), 1), N - 1)
    perm = SeededRng(seed).child(0x5B).permutation(N).numpy()
    tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    stats = Standardizer.fit(dataset.X[tr], dataset.y[tr])
    train = replace(dataset, X=dataset.X[tr], y=dataset.y[tr], stats=stats)
    test = replace(dataset, X=dataset.X[te], y=dataset.y[te], stats=stats)
    return train, test


def make_synthetic(kind: str, N: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    """``step``: y = sign(x) + eps; ``sine``: y = sin(4 pi x) + eps; x ~ U(-1, 1)."""
    if N < 2:
        raise TooFewRows("synthetic datasets need N >= 2")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51]))
    x = rng.uniform(-1.0, 1.0, size=N)
    eps = rng.standard_normal(N) * noise
    if kind == "step":
        f = np.sign(x)
    elif kind == "sine":
        f = np.sin(4 * np.pi * x)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    return Dataset(x[:, None], f + eps, ["x"], "y")
