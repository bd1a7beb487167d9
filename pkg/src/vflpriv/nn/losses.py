"""Scalar losses returning ``(value, d value / d prediction)``."""

from __future__ import annotations

import numpy as np

from vflpriv.errors import DomainError, ShapeError

PROB_EPS = 1e-7


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-softmax of the true class."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n or n < 1:
        raise ShapeError(f"{labels.shape[0]} labels for {n} rows")
    if labels.min() < 0 or labels.max() >= c:
        raise DomainError(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsumexp - z[rows, labels]))
    grad = np.exp(z - logsumexp[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n


def loss_bce(probs: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over every entry of ``probs``.

    ``labels`` must broadcast to ``probs``; a 1-D label vector is treated as a
    column. Probabilities are clamped to ``[eps, 1 - eps]``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim == 1:
        y = y.reshape(-1, 1)
    if y.shape != probs.shape:
        raise ShapeError(f"labels {y.shape} vs probs {probs.shape}")
    p = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    loss = float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))
    grad = (p - y) / (p * (1.0 - p)) / probs.size
    return loss, grad


def loss_mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


LOSSES = {"ce": loss_cross_entropy, "bce": loss_bce, "mse": loss_mse}


def get_loss(kind: str):
    try:
        return LOSSES[kind]
    except KeyError:
        raise DomainError(f"unknown loss {kind!r}") from None
