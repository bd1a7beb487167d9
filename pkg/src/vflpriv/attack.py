"""Reconstruction attacks run by an honest-but-curious coordinator.

The coordinator knows the raw attributes of a few poisoned records. Pairing
those with the intermediate outputs it legitimately receives gives a
supervised set for a decoder that maps features back to the victim's inputs.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from vflpriv.data import PoisonSet
from vflpriv.errors import AttackSetupError, DomainError
from vflpriv.metrics import (
    MetricKind,
    PrivacyMeasurement,
    classification_metrics,
    error_rate,
    min_privacy,
    mse_metric,
)
from vflpriv.nn.losses import loss_bce, loss_cross_entropy, loss_mse
from vflpriv.nn.model import MlpModel, build_mlp
from vflpriv.nn.optim import Adam
from vflpriv.protocol import IntermediateOutput


@dataclass(frozen=True)
class DecoderTarget:
    """What a decoder reconstructs from a victim's features.

    ``binary``: every victim column, one sigmoid each (BCE).
    ``regression``: the selected columns, linear outputs (MSE).
    ``categorical``: one attribute with ``n_classes`` levels (CE), stored either
    as a single integer-coded column or as a one-hot block of ``n_classes``
    columns.
    """

    kind: str
    columns: tuple[int, ...]
    n_classes: int = 0

    def __post_init__(self):
        if self.kind not in ("binary", "regression", "categorical"):
            raise DomainError(f"unknown decoder target {self.kind!r}")
        if self.kind == "categorical" and (len(self.columns) not in (1, self.n_classes) or self.n_classes < 2):
            raise DomainError("categorical target needs one column or a one-hot block, and >= 2 classes")

    @property
    def out_width(self) -> int:
        return self.n_classes if self.kind == "categorical" else len(self.columns)

    def extract(self, raw: np.ndarray) -> np.ndarray:
        if self.kind == "categorical":
            if len(self.columns) == 1:
                return raw[:, self.columns[0]].astype(np.int64)
            return raw[:, list(self.columns)].argmax(axis=1)
        return raw[:, list(self.columns)]

    def loss(self, out: np.ndarray, y: np.ndarray):
        if self.kind == "binary":
            return loss_bce(out, y)
        if self.kind == "categorical":
            return loss_cross_entropy(out, y)
        return loss_mse(out, y)

    def predict(self, out: np.ndarray) -> np.ndarray:
        if self.kind == "binary":
            return (out >= 0.5).astype(np.int64)
        if self.kind == "categorical":
            return out.argmax(axis=1)
        return out

    def default_metric(self) -> MetricKind:
        return {"binary": MetricKind.RECALL, "categorical": MetricKind.ERROR_RATE,
                "regression": MetricKind.MSE}[self.kind]

    @classmethod
    def all_binary(cls, width: int) -> "DecoderTarget":
        return cls("binary", tuple(range(width)))

    @classmethod
    def all_regression(cls, width: int) -> "DecoderTarget":
        return cls("regression", tuple(range(width)))


def decoder_layers(feature_width: int, target: DecoderTarget, hidden: Sequence[str] = ("relu",)) -> list[str]:
    """Layer tokens for a decoder: ``hidden`` then a head sized for ``target``."""
    spec = list(hidden) + [f"linear:{target.out_width}"]
    if target.kind == "binary":
        spec.append("sigmoid")
    return spec


def make_decoder_model(feature_width: int, target: DecoderTarget, rng: np.random.Generator,
                       hidden: Sequence[str] = ("relu",)) -> MlpModel:
    return build_mlp(feature_width, decoder_layers(feature_width, target, hidden), rng)


@dataclass
class DecoderConfig:
    epochs: int = 30
    lr: float = 0.01
    batch_size: int = 128
    hidden: tuple[str, ...] = ("relu",)


class AttackDecoder:
    def __init__(self, model: MlpModel, target: DecoderTarget):
        if model.out_width != target.out_width:
            raise AttackSetupError(f"decoder emits {model.out_width} columns, target needs {target.out_width}")
        self.model = model
        self.target = target
        self.optimizer = Adam()
        self.steps = 0

    @classmethod
    def fresh(cls, feature_width: int, target: DecoderTarget, rng: np.random.Generator,
              hidden: Sequence[str] = ("relu",)) -> "AttackDecoder":
        return cls(make_decoder_model(feature_width, target, rng, hidden), target)

    def reconstruction_loss(self, features: np.ndarray, raw: np.ndarray) -> float:
        return self.target.loss(self.model(features), self.target.extract(raw))[0]

    def fit(self, features: np.ndarray, raw: np.ndarray, epochs: int, lr: float, batch_size: int,
            rng: np.random.Generator) -> list[float]:
        """Mini-batch Adam on the reconstruction loss; returns per-epoch mean loss."""
        y = self.target.extract(raw)
        n = features.shape[0]
        losses = []
        for _ in range(epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                trace = self.model.forward(features[idx], train=True)
                l, dout = self.target.loss(trace.output, y[idx])
                grads = self.model.backward(trace, dout)
                self.optimizer.step(self.model, grads, lr)
                self.steps += 1
                total += l * len(idx)
            losses.append(total / max(n, 1))
        return losses

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.target.predict(self.model(features))


# feature tap ---------------------------------------------------------------

@dataclass(frozen=True)
class FeaturePair:
    record_id: int
    features: np.ndarray
    raw: np.ndarray
    epoch: int


class FeatureTap:
    """Read-only recorder of one victim's uploaded features for poisoned rows."""

    def __init__(self, victim_id: int, poison: PoisonSet, record_ids: np.ndarray | None = None):
        self.victim_id = victim_id
        self.poison = set(int(i) for i in poison.indices)
        self.record_ids = record_ids
        self.entries: list[tuple[int, int, np.ndarray, np.ndarray]] = []

    def __call__(self, out: IntermediateOutput) -> None:
        if out.client_id != self.victim_id or not self.poison:
            return
        mask = np.fromiter((int(r) in self.poison for r in out.rows), dtype=bool, count=len(out.rows))
        if mask.any():
            self.entries.append((out.epoch, out.batch_index, out.rows[mask].copy(), np.array(out.features[mask])))

    def to_jsonl(self) -> str:
        lines = []
        for epoch, bi, rows, feats in self.entries:
            lines.append(json.dumps({
                "epoch": epoch, "batch": bi, "client": self.victim_id,
                "records": [int(r) for r in rows],
                "shape": list(feats.shape),
                "features": base64.b64encode(feats.astype("<f8").tobytes()).decode("ascii"),
            }, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_jsonl(cls, text: str, poison: PoisonSet) -> "FeatureTap":
        tap = None
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if tap is None:
                tap = cls(rec["client"], poison)
            feats = np.frombuffer(base64.b64decode(rec["features"]), dtype="<f8").reshape(rec["shape"]).copy()
            tap.entries.append((rec["epoch"], rec["batch"], np.array(rec["records"]), feats))
        return tap if tap is not None else cls(-1, poison)


def collect_poison_pairs(tap: FeatureTap, poison: PoisonSet, shard: np.ndarray) -> dict[int, list[FeaturePair]]:
    """Group the tapped poison features by epoch and attach the known raw rows."""
    expected = set(int(i) for i in poison.indices)
    by_epoch: dict[int, list[FeaturePair]] = {}
    for epoch, _, rows, feats in tap.entries:
        for r, f in zip(rows, feats):
            if int(r) not in expected:
                raise AttackSetupError(f"tapped record {int(r)} is not in the poison set")
            by_epoch.setdefault(epoch, []).append(FeaturePair(int(r), f, shard[int(r)], epoch))
    for epoch, pairs in by_epoch.items():
        got = sorted(p.record_id for p in pairs)
        if got != sorted(expected):
            missing = sorted(expected - set(got))
            raise AttackSetupError(f"epoch {epoch}: tap lacks poison records {missing[:5]}")
        pairs.sort(key=lambda p: p.record_id)
    return dict(sorted(by_epoch.items()))


def _stack(pairs: Sequence[FeaturePair]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([p.features for p in pairs]), np.stack([p.raw for p in pairs])


def train_static_decoder(pairs: Sequence[FeaturePair], target: DecoderTarget, cfg: DecoderConfig,
                         seed: int) -> AttackDecoder:
    """Fit a fresh decoder on the pairs captured in a single epoch."""
    if not pairs:
        raise AttackSetupError("static attack needs at least one feature pair")
    if len({p.epoch for p in pairs}) != 1:
        raise AttackSetupError("static attack pairs must come from one epoch")
    rng = np.random.default_rng(seed)
    feats, raw = _stack(pairs)
    dec = AttackDecoder.fresh(feats.shape[1], target, rng, cfg.hidden)
    dec.fit(feats, raw, cfg.epochs, cfg.lr, cfg.batch_size, rng)
    return dec


class AdaptiveAttacker:
    """One decoder warm-started across epochs of the pair stream."""

    def __init__(self, target: DecoderTarget, cfg: DecoderConfig, seed: int):
        self.target = target
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.decoder: AttackDecoder | None = None
        self.last_epoch = 0

    def update(self, epoch: int, pairs: Sequence[FeaturePair]) -> AttackDecoder:
        if epoch <= self.last_epoch:
            raise AttackSetupError(f"adaptive stream out of order: epoch {epoch} after {self.last_epoch}")
        self.last_epoch = epoch
        if not pairs:
            raise AttackSetupError("adaptive attack needs at least one feature pair per epoch")
        feats, raw = _stack(pairs)
        if self.decoder is None:
            self.decoder = AttackDecoder.fresh(feats.shape[1], self.target, self.rng, self.cfg.hidden)
        self.decoder.fit(feats, raw, self.cfg.epochs, self.cfg.lr, self.cfg.batch_size, self.rng)
        return self.decoder


def train_adaptive_decoder(stream: dict[int, Sequence[FeaturePair]] | Iterable[tuple[int, Sequence[FeaturePair]]],
                           target: DecoderTarget, cfg: DecoderConfig, seed: int) -> AttackDecoder:
    items = list(stream.items()) if isinstance(stream, dict) else list(stream)
    attacker = AdaptiveAttacker(target, cfg, seed)
    for epoch, pairs in items:
        attacker.update(epoch, pairs)
    if attacker.decoder is None:
        raise AttackSetupError("empty pair stream")
    return attacker.decoder


def evaluate_attack(dec: AttackDecoder, victim: MlpModel, shard: np.ndarray, eval_rows: np.ndarray,
                    metric: MetricKind | str | None = None, poison: PoisonSet | None = None) -> float:
    """Leakage of ``dec`` on records the attacker never held."""
    eval_rows = np.asarray(eval_rows)
    if poison is not None and np.intersect1d(eval_rows, poison.indices).size:
        raise AttackSetupError("evaluation records overlap the poison set")
    metric = MetricKind(metric) if metric is not None else dec.target.default_metric()
    raw = shard[eval_rows]
    feats = victim(raw)
    out = dec.model(feats)
    truth = dec.target.extract(raw)
    pred = dec.target.predict(out)
    if metric == MetricKind.MSE:
        return mse_metric(out, truth)
    if dec.target.kind == "categorical":
        if metric != MetricKind.ERROR_RATE:
            raise DomainError("categorical targets are scored by error rate")
        return error_rate(pred, truth)
    if metric == MetricKind.AUC_PR:
        raise DomainError("auc_pr is an accuracy metric here, not a privacy metric")
    return classification_metrics(pred, truth).get(metric)


@dataclass
class AttackReport:
    metric: MetricKind
    entries: list[PrivacyMeasurement] = field(default_factory=list)

    def add(self, epoch: int, value: float) -> None:
        self.entries.append(PrivacyMeasurement(self.metric, float(value), epoch))

    @property
    def summary(self) -> PrivacyMeasurement:
        return min_privacy(self.entries)

    def to_jsonl(self) -> str:
        rows = [json.dumps({"epoch": m.epoch, "metric": self.metric.value, "value": m.value}) for m in self.entries]
        s = self.summary
        rows.append(json.dumps({"summary": "min_privacy", "metric": self.metric.value,
                                "epoch": s.epoch, "value": s.value}))
        return "\n".join(rows) + "\n"
