"""CSV ingestion, in-between (gap) splits and train-statistics standardization."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class DataFormatError(ValueError):
    """Malformed input file."""


@dataclass(frozen=True)
class RegressionDataset:
    X: np.ndarray
    y: np.ndarray
    name: str = "dataset"
    feature_names: tuple[str, ...] = ()
    feature_means: np.ndarray | None = None
    feature_stds: np.ndarray | None = None
    target_mean: float = 0.0
    target_std: float = 1.0

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> RegressionDataset:
        idx = np.asarray(idx, dtype=np.intp)
        return replace(self, X=self.X[idx], y=self.y[idx])

    def unstandardize_targets(self, y):
        return np.asarray(y) * self.target_std + self.target_mean


@dataclass(frozen=True)
class GapSplit:
    dimension: int
    train_indices: np.ndarray
    test_indices: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def split_id(self) -> str:
        return f"gap{self.dimension:02d}"


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_csv(path, name: str | None = None) -> RegressionDataset:
    """Header row, numeric cells, last column is the target."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if len(header) < 2:
        raise DataFormatError(f"{path}: need at least one feature and a target column")
    if not body:
        raise DataFormatError(f"{path}: empty dataset (no data rows)")
    values = np.empty((len(body), len(header)))
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataFormatError(f"{path}: row {i} has {len(row)} cells, header has {len(header)}")
        for j, cell in enumerate(row):
            try:
                values[i - 2, j] = float(cell)
            except ValueError:
                raise DataFormatError(
                    f"{path}: non-numeric cell {cell!r} at row {i}, column {j + 1} ({header[j]})"
                ) from None
    return RegressionDataset(values[:, :-1].copy(), values[:, -1].copy(),
                             name=name or path.stem, feature_names=tuple(h.strip() for h in header[:-1]))


def gap_split(X, dimension: int) -> GapSplit:
    N = X.shape[0]
    order = np.argsort(X[:, dimension], kind="stable")
    lo, hi = N // 3, (2 * N) // 3
    test = np.sort(order[lo:hi])
    train = np.sort(np.concatenate([order[:lo], order[hi:]]))
    return GapSplit(dimension, train, test)


def gap_splits(ds: RegressionDataset) -> list[GapSplit]:
    """One split per input dimension holding out the middle third along it."""
    if ds.n < 3:
        raise ValueError(f"gap splits need at least 3 samples, dataset has {ds.n}")
    return [gap_split(ds.X, d) for d in range(ds.d)]


def _stats(A):
    mean = A.mean(axis=0)
    std = A.std(axis=0)                       # population convention
    return mean, np.where(std == 0.0, 1.0, std)


def standardize(ds: RegressionDataset, split: GapSplit) -> tuple[RegressionDataset, RegressionDataset]:
    """Standardize with statistics from the training rows only.

    Returns ``(train, test)`` datasets carrying the statistics used.
    """
    tr, te = split.train_indices, split.test_indices
    if len(np.intersect1d(tr, te)) or len(tr) + len(te) != ds.n:
        raise ValueError("split is not a partition of the dataset")
    mx, sx = _stats(ds.X[tr])
    my, sy = _stats(ds.y[tr][:, None])
    my, sy = float(my[0]), float(sy[0])

    def apply(idx):
        return replace(ds, X=(ds.X[idx] - mx) / sx, y=(ds.y[idx] - my) / sy,
                       feature_means=mx, feature_stds=sx, target_mean=my, target_std=sy)

    return apply(tr), apply(te)


def unstandardize_inputs(ds: RegressionDataset, Xs):
    return np.asarray(Xs) * ds.feature_stds + ds.feature_means


def write_manifest(path, ds: RegressionDataset, split: GapSplit, checksum: str) -> None:
    from .io import atomic_write_text
    doc = {
        "dataset": ds.name,
        "dimension": int(split.dimension),
        "checksum": checksum,
        "train_indices": [int(i) for i in split.train_indices],
        "test_indices": [int(i) for i in split.test_indices],
    }
    atomic_write_text(path, json.dumps(doc, indent=1) + "\n")


def read_manifest(path) -> tuple[GapSplit, dict]:
    doc = json.loads(Path(path).read_text())
    split = GapSplit(int(doc["dimension"]), np.asarray(doc["train_indices"], dtype=np.intp),
                     np.asarray(doc["test_indices"], dtype=np.intp))
    return split, doc
