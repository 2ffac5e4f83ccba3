"""Client datasets: seeded Gaussian blobs, or a CSV split across clients."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


class CSVParseError(DataError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaError(DataError):
    pass


@dataclass
class Dataset:
    shards: list[tuple[np.ndarray, np.ndarray]]
    test_x: np.ndarray
    test_y: np.ndarray
    classes: int
    dim: int


def _blob_means(classes: int, dim: int, separation: float, rng) -> np.ndarray:
    if classes == 2:
        d = rng.normal(size=dim)
        d /= np.linalg.norm(d)
        return np.vstack([separation * d, -separation * d])
    dirs = rng.normal(size=(classes, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return separation * dirs


def gen_synthetic_data(classes: int = 2, dim: int = 20, per_client: int = 64, n_clients: int = 50,
                       heterogeneity: float = 0.0, separation: float = 4.0, test_size: int = 2000,
                       seed: int = 0) -> Dataset:
    """Unit-variance Gaussian blobs; each class mean sits ``separation`` from the origin.

    ``heterogeneity`` in [0, 1] mixes a client-specific dominant label into the
    otherwise uniform label distribution (0 is IID).
    """
    if dim < 2 or classes < 2:
        raise DataError("need dim >= 2 and classes >= 2")
    if per_client < 1 or n_clients < 1:
        raise DataError("per-client count and client count must be positive")
    if not 0 <= heterogeneity <= 1:
        raise DataError("heterogeneity must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    means = _blob_means(classes, dim, separation, rng)

    def draw(labels):
        return means[labels] + rng.normal(size=(len(labels), dim)), labels

    shards = []
    for i in range(n_clients):
        probs = np.full(classes, (1 - heterogeneity) / classes)
        probs[i % classes] += heterogeneity
        shards.append(draw(rng.choice(classes, size=per_client, p=probs)))
    test_x, test_y = draw(rng.integers(0, classes, size=test_size))
    return Dataset(shards, test_x, test_y, classes, dim)


def ingest_csv_dataset(path: str | Path, n_clients: int, classes: int | None = None,
                       header: bool = False, test_fraction: float = 0.0,
                       seed: int = 0) -> Dataset:
    """Read ``features..., label`` rows, min-max scale features to [0, 1], split IID."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    rows, labels = [], []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if header and lineno == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2:
                raise CSVParseError(lineno, "need at least one feature and a label")
            if rows and len(row) - 1 != len(rows[0]):
                raise CSVParseError(lineno, f"expected {len(rows[0]) + 1} columns, got {len(row)}")
            try:
                feats = [float(c) for c in row[:-1]]
                label = float(row[-1])
            except ValueError as exc:
                raise CSVParseError(lineno, str(exc)) from None
            if label != int(label):
                raise CSVParseError(lineno, f"label {row[-1]!r} is not an integer")
            rows.append(feats)
            labels.append((lineno, int(label)))
    if not rows:
        raise DataError(f"{path} holds no data rows")
    X = np.asarray(rows, dtype=np.float64)
    y = np.asarray([lab for _, lab in labels], dtype=int)
    n_classes = classes if classes is not None else int(y.max()) + 1
    for lineno, lab in labels:
        if not 0 <= lab < n_classes:
            raise SchemaError(f"line {lineno}: label {lab} outside [0, {n_classes})")
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    X = (X - lo) / span

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    n_test = int(round(test_fraction * len(y)))
    test_idx, train_idx = order[:n_test], order[n_test:]
    if len(train_idx) < n_clients:
        raise DataError(f"{len(train_idx)} training rows cannot cover {n_clients} clients")
    shards = [(X[part], y[part]) for part in np.array_split(train_idx, n_clients)]
    return Dataset(shards, X[test_idx], y[test_idx], n_classes, X.shape[1])
