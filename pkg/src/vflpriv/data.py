"""Synthetic tabular surrogates, CSV ingestion, vertical partitioning and batching."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from vflpriv.errors import DomainError, IngestionError

BINARY = "binary"
NUMERIC = "numeric"


def column_kind(spec: str) -> tuple[str, int | None]:
    """Parse ``binary``, ``numeric`` or ``categorical:k``."""
    name, _, arg = spec.partition(":")
    if name == "categorical":
        k = int(arg)
        if k < 2:
            raise DomainError("categorical columns need at least 2 levels")
        return "categorical", k
    if name in (BINARY, NUMERIC):
        return name, None
    raise DomainError(f"unknown column kind {spec!r}")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    schema: tuple[str, ...]
    record_ids: np.ndarray
    n_classes: int

    def __post_init__(self):
        n, d = self.features.shape
        if self.labels.shape != (n,) or self.record_ids.shape != (n,):
            raise DomainError("features, labels and record ids disagree on N")
        if len(self.schema) != d:
            raise DomainError(f"schema has {len(self.schema)} columns, features have {d}")
        if len(np.unique(self.record_ids)) != n:
            raise DomainError("record ids must be unique")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DomainError("labels out of range")
        for j, kind in enumerate(self.schema):
            col = self.features[:, j]
            name, k = column_kind(kind)
            if name == BINARY and not np.isin(col, (0.0, 1.0)).all():
                raise DomainError(f"binary column {j} holds values outside {{0,1}}")
            if name == "categorical" and ((col < 0) | (col >= k) | (col != np.round(col))).any():
                raise DomainError(f"categorical column {j} outside [0, {k})")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.labels[idx], self.schema, self.record_ids[idx], self.n_classes)


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def gen_purchase_like(n: int, d: int = 600, classes: int = 100, seed: int = 0,
                      flip: float = 0.1, density: float = 0.5, coarse_columns: int = 0,
                      coarse_group: int = 2) -> Dataset:
    """Binary shopping-basket surrogate.

    Each class owns a prototype in {0,1}^d with ``density`` ones; a record
    copies its class prototype and flips every bit independently with
    probability ``flip``.

    With ``coarse_columns > 0`` the first ``coarse_columns`` columns only see a
    coarse label: classes ``c`` with equal ``c // coarse_group`` share the
    prototype there, so the remaining columns are needed to tell them apart.
    """
    if n < classes:
        raise DomainError(f"need n >= classes ({n} < {classes})")
    if d < 2:
        raise DomainError("need d >= 2")
    if not 0 <= coarse_columns < d:
        raise DomainError("coarse_columns must lie in [0, d)")
    if coarse_group < 1:
        raise DomainError("coarse_group must be >= 1")
    rng = _rng(seed)
    protos = (rng.random((classes, d)) < density).astype(np.float64)
    if coarse_columns:
        protos[:, :coarse_columns] = protos[np.arange(classes) // coarse_group * coarse_group, :coarse_columns]
    labels = np.concatenate([np.arange(classes), rng.integers(0, classes, n - classes)])
    labels = rng.permutation(labels)
    flips = rng.random((n, d)) < flip
    x = np.abs(protos[labels] - flips)
    return Dataset(x, labels.astype(np.int64), (BINARY,) * d, np.arange(n), classes)


def gen_credit_like(n: int, d: int = 28, positive_rate: float = 0.00172, seed: int = 0,
                    separation: float = 1.5) -> Dataset:
    """Unbalanced fraud surrogate: two Gaussian clusters, columns standardised."""
    if not 0 < positive_rate < 0.5:
        raise DomainError("positive_rate must lie in (0, 0.5)")
    n_pos = int(np.floor(n * positive_rate + 1e-9))
    if n_pos < 1:
        raise DomainError(f"n * positive_rate = {n * positive_rate:g} < 1 positive")
    rng = _rng(seed)
    labels = np.zeros(n, dtype=np.int64)
    labels[rng.choice(n, n_pos, replace=False)] = 1
    # correlated PCA-like components
    mix = rng.normal(size=(d, d)) / np.sqrt(d)
    direction = rng.normal(size=d)
    direction /= np.linalg.norm(direction)
    z = rng.normal(size=(n, d)) @ mix + np.outer(labels, direction) * separation * 3
    x = (z - z.mean(axis=0)) / z.std(axis=0)
    return Dataset(x, labels, (NUMERIC,) * d, np.arange(n), 2)


ADULT_CARDINALITIES = (10, 9, 16, 7, 15, 6, 5, 2, 10, 4, 12)


def gen_adult_like(n: int, attr_cardinalities: Sequence[int] = ADULT_CARDINALITIES, seed: int = 0) -> Dataset:
    """Census-like surrogate with integer-coded categorical attributes.

    Attributes are drawn from a shared latent factor so they correlate with one
    another and with the binary income label.
    """
    cards = [int(k) for k in attr_cardinalities]
    if any(k < 2 for k in cards):
        raise DomainError("every cardinality must be >= 2")
    rng = _rng(seed)
    latent = rng.normal(size=(n, 2))
    cols = []
    score = np.zeros(n)
    for k in cards:
        load = rng.normal(size=2)
        raw = latent @ load + 0.7 * rng.normal(size=n)
        cuts = np.quantile(raw, np.linspace(0, 1, k + 1)[1:-1])
        col = np.searchsorted(cuts, raw).astype(np.float64)
        cols.append(col)
        score += rng.normal() * (col / (k - 1) - 0.5)
    score = (score - score.mean()) / (score.std() + 1e-12)
    labels = (score + 0.3 * rng.normal(size=n) > 0.6).astype(np.int64)
    x = np.stack(cols, axis=1)
    schema = tuple(f"categorical:{k}" for k in cards)
    return Dataset(x, labels, schema, np.arange(n), 2)


def one_hot(ds: Dataset) -> np.ndarray:
    """Expand categorical columns to indicator blocks; other columns pass through."""
    blocks = []
    for j, kind in enumerate(ds.schema):
        name, k = column_kind(kind)
        col = ds.features[:, j]
        if name == "categorical":
            blocks.append(np.eye(k)[col.astype(np.int64)])
        else:
            blocks.append(col[:, None])
    return np.concatenate(blocks, axis=1)


# CSV -----------------------------------------------------------------------

def write_csv(ds: Dataset, path, label_column: str = "label") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(ds.d)] + [label_column])
        for row, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) if column_kind(k)[0] == NUMERIC else str(int(v))
                        for v, k in zip(row, ds.schema)] + [str(int(y))])


def load_csv(path, schema: Sequence[str], n_classes: int | None = None) -> Dataset:
    """Read a comma-separated file whose last column is the integer label.

    ``schema`` lists one column kind per feature column.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path}: no such file")
    kinds = [column_kind(s) for s in schema]
    rows, labels = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestionError(f"{path}: empty file")
        if len(header) != len(kinds) + 1:
            raise IngestionError(f"{path}: header has {len(header)} columns, schema expects {len(kinds) + 1}")
        for lineno, raw in enumerate(reader, start=2):
            if len(raw) != len(header):
                raise IngestionError(f"{path}: row {lineno} has {len(raw)} columns")
            vals = []
            for j, ((name, k), cell) in enumerate(zip(kinds, raw)):
                cell = cell.strip()
                if cell == "":
                    raise IngestionError(f"{path}: row {lineno}, column {header[j]!r}: missing value")
                try:
                    v = float(cell)
                except ValueError:
                    raise IngestionError(f"{path}: row {lineno}, column {header[j]!r}: cannot parse {cell!r}") from None
                if name == BINARY and v not in (0.0, 1.0):
                    raise IngestionError(f"{path}: row {lineno}, column {header[j]!r}: {cell!r} is not binary")
                if name == "categorical" and (v != int(v) or not 0 <= v < k):
                    raise IngestionError(f"{path}: row {lineno}, column {header[j]!r}: {cell!r} outside [0, {k})")
                if not np.isfinite(v):
                    raise IngestionError(f"{path}: row {lineno}, column {header[j]!r}: non-finite value")
                vals.append(v)
            label_cell = raw[-1].strip()
            try:
                labels.append(int(label_cell))
            except ValueError:
                raise IngestionError(f"{path}: row {lineno}, column {header[-1]!r}: bad label {label_cell!r}") from None
            rows.append(vals)
    x = np.array(rows, dtype=np.float64).reshape(len(rows), len(kinds))
    y = np.array(labels, dtype=np.int64)
    classes = n_classes if n_classes is not None else (int(y.max()) + 1 if y.size else 1)
    return Dataset(x, y, tuple(schema), np.arange(len(rows)), max(classes, 2))


# partitioning and batching -------------------------------------------------

@dataclass(frozen=True)
class PartitionedDataset:
    shards: tuple[np.ndarray, ...]
    labels: np.ndarray
    split_widths: tuple[int, ...]
    record_ids: np.ndarray
    schemas: tuple[tuple[str, ...], ...] = field(default=())

    @property
    def n_clients(self) -> int:
        return len(self.shards)

    def concat(self) -> np.ndarray:
        return np.concatenate(self.shards, axis=1)


def partition_vertical(ds: Dataset, split_widths: Sequence[int]) -> PartitionedDataset:
    """Assign contiguous column blocks to clients in order."""
    widths = tuple(int(w) for w in split_widths)
    if any(w < 1 for w in widths) or sum(widths) != ds.d:
        raise DomainError(f"split widths {list(widths)} must be positive and sum to d={ds.d}")
    edges = np.cumsum((0,) + widths)
    shards = tuple(ds.features[:, a:b].copy() for a, b in zip(edges[:-1], edges[1:]))
    schemas = tuple(ds.schema[a:b] for a, b in zip(edges[:-1], edges[1:]))
    return PartitionedDataset(shards, ds.labels.copy(), widths, ds.record_ids.copy(), schemas)


@dataclass(frozen=True)
class BatchPlan:
    batches: tuple[np.ndarray, ...]
    seed: int | None
    batch_size: int

    def __iter__(self):
        return iter(self.batches)

    def __len__(self):
        return len(self.batches)


def make_batches(n: int, batch_size: int, seed=None, shuffle: bool = True) -> BatchPlan:
    if batch_size < 1:
        raise DomainError("batch_size must be >= 1")
    order = _rng(seed).permutation(n) if shuffle else np.arange(n)
    batches = tuple(order[i:i + batch_size] for i in range(0, n, batch_size))
    return BatchPlan(batches, seed, batch_size)


@dataclass(frozen=True)
class PoisonSet:
    indices: np.ndarray
    alpha: float

    def __len__(self):
        return len(self.indices)


def sample_poison(train_indices, alpha: float, seed=None) -> PoisonSet:
    if not 0.0 <= alpha <= 1.0:
        raise DomainError("alpha must lie in [0, 1]")
    train_indices = np.asarray(train_indices)
    k = int(np.floor(alpha * len(train_indices) + 1e-9))
    chosen = _rng(seed).choice(train_indices, size=k, replace=False) if k else train_indices[:0]
    return PoisonSet(np.sort(chosen), alpha)


def train_eval_split(n: int, seed=None, train_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    order = _rng(seed).permutation(n)
    cut = int(round(train_fraction * n))
    return np.sort(order[:cut]), np.sort(order[cut:])
