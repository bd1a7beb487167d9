"""Accuracy and privacy measurements."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from vflpriv.errors import DomainError, ShapeError


class MetricKind(str, Enum):
    ERROR_RATE = "error_rate"
    RECALL = "recall"
    PRECISION = "precision"
    F1 = "f1"
    MSE = "mse"
    AUC_PR = "auc_pr"

    @property
    def higher_is_leakier(self) -> bool:
        return self not in (MetricKind.ERROR_RATE, MetricKind.MSE)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class ClassificationReport:
    counts: ConfusionCounts
    error_rate: float
    recall: float
    precision: float
    f1: float

    def get(self, kind: MetricKind | str) -> float:
        return getattr(self, MetricKind(kind).value)


@dataclass(frozen=True)
class PrivacyMeasurement:
    kind: MetricKind
    value: float
    epoch: int | None = None

    @property
    def higher_is_leakier(self) -> bool:
        return MetricKind(self.kind).higher_is_leakier


def confusion(pred, truth) -> ConfusionCounts:
    """Binary confusion counts over every entry (micro-averaged across columns)."""
    p = np.asarray(pred).astype(bool).ravel()
    t = np.asarray(truth).astype(bool).ravel()
    if p.shape != t.shape:
        raise ShapeError(f"pred has {p.size} entries, truth has {t.size}")
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def classification_metrics(pred, truth) -> ClassificationReport:
    """Recall, precision, error rate and F1 for binary predictions.

    Degenerate denominators yield 0 rather than NaN.
    """
    c = confusion(pred, truth)
    if c.total < 1:
        raise ShapeError("need at least one prediction")
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    f1 = 2 * recall * precision / (recall + precision) if recall + precision else 0.0
    return ClassificationReport(c, (c.fp + c.fn) / c.total, recall, precision, f1)


def accuracy(pred, truth) -> float:
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape or pred.size == 0:
        raise ShapeError("accuracy needs equal, non-empty label vectors")
    return float(np.mean(pred == truth))


def error_rate(pred, truth) -> float:
    """Share of mismatched labels; works for categorical as well as binary targets."""
    return 1.0 - accuracy(pred, truth)


def mse_metric(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"pred {pred.shape} vs truth {truth.shape}")
    return float(np.mean((pred - truth) ** 2))


def auc_pr(scores, labels) -> float:
    """Area under the precision-recall curve.

    Thresholds step through distinct scores in descending order, so tied scores
    enter together. The curve starts at (recall 0, precision 1) and successive
    points are joined by trapezoids.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(np.int64).ravel()
    if scores.shape != labels.shape:
        raise ShapeError("scores and labels differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise DomainError("auc_pr needs at least one positive label")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # last index of each tie group
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp, fp = tp[ends], fp[ends]
    recall = np.r_[0.0, tp / n_pos]
    precision = np.r_[1.0, tp / (tp + fp)]
    return float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2))


def min_privacy(track: Sequence[PrivacyMeasurement]) -> PrivacyMeasurement:
    """Leakiest measurement of a run: max for recall-like kinds, min for error/MSE."""
    if not track:
        raise DomainError("min_privacy needs at least one measurement")
    kinds = {MetricKind(m.kind) for m in track}
    if len(kinds) != 1:
        raise DomainError(f"mixed metric kinds {sorted(k.value for k in kinds)}")
    kind = kinds.pop()
    pick = max if kind.higher_is_leakier else min
    return pick(track, key=lambda m: m.value)


def privacy_level(kind: MetricKind | str, value: float) -> float:
    """Map a leakage value to a score where higher means more private."""
    kind = MetricKind(kind)
    if kind in (MetricKind.ERROR_RATE, MetricKind.MSE):
        return value
    return 1.0 - value
