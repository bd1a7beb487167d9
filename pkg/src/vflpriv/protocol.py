"""Synchronous split-network training: clients, coordinator and the epoch loop.

Clients own a bottom model and a vertical shard. The coordinator owns the top
model (one head per client, concatenation, shared trunk) and the labels.
Messages crossing the boundary are immutable ``IntermediateOutput`` and
``GradFeedback`` values; the coordinator always reduces in ascending client id.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from vflpriv.data import BatchPlan, make_batches
from vflpriv.errors import ProtocolError
from vflpriv.metrics import accuracy, auc_pr
from vflpriv.nn.losses import loss_bce, loss_cross_entropy
from vflpriv.nn.model import ForwardTrace, GradBundle, MlpModel
from vflpriv.nn.optim import make_optimizer


@dataclass(frozen=True)
class IntermediateOutput:
    client_id: int
    epoch: int
    batch_index: int
    features: np.ndarray
    rows: np.ndarray  # record indices in batch order

    def __post_init__(self):
        self.features.setflags(write=False)


@dataclass(frozen=True)
class GradFeedback:
    client_id: int
    epoch: int
    batch_index: int
    grad: np.ndarray


class ClientState:
    def __init__(self, client_id: int, model: MlpModel, shard: np.ndarray, optimizer: str = "adam"):
        if model.in_width != shard.shape[1]:
            raise ProtocolError(f"client {client_id}: model width {model.in_width} != shard width {shard.shape[1]}")
        self.id = client_id
        self.model = model
        self.shard = shard
        self.optimizer = make_optimizer(optimizer)
        self._pending: tuple[int, int, ForwardTrace, np.ndarray] | None = None

    def batch(self, rows: np.ndarray) -> np.ndarray:
        return self.shard[rows]

    def client_forward(self, rows: np.ndarray, epoch: int = 0, batch_index: int = 0) -> IntermediateOutput:
        x = self.shard[rows]
        trace = self.model.forward(x, train=True)
        self._pending = (epoch, batch_index, trace, x)
        return IntermediateOutput(self.id, epoch, batch_index, trace.output.copy(), np.asarray(rows).copy())

    def local_gradient(self, fb: GradFeedback) -> GradBundle:
        """Chain the coordinator's feedback through the local model."""
        if self._pending is None:
            raise ProtocolError(f"client {self.id}: feedback without a forward pass")
        epoch, bi, trace, _ = self._pending
        if (fb.client_id, fb.epoch, fb.batch_index) != (self.id, epoch, bi):
            raise ProtocolError(
                f"client {self.id}: stale feedback for epoch {fb.epoch} batch {fb.batch_index}, "
                f"expected epoch {epoch} batch {bi}")
        if fb.grad.shape != trace.output.shape:
            raise ProtocolError(f"client {self.id}: feedback shape {fb.grad.shape} != output {trace.output.shape}")
        return self.model.backward(trace, fb.grad)

    @property
    def last_input(self) -> np.ndarray:
        return self._pending[3]

    def apply(self, grads: GradBundle, lr: float) -> None:
        self.optimizer.step(self.model, grads, lr)
        self._pending = None

    def client_backward(self, fb: GradFeedback, lr: float) -> None:
        self.apply(self.local_gradient(fb), lr)


@dataclass
class TopStep:
    loss: float
    correct: int
    feedback: dict[int, GradFeedback]


class CoordinatorState:
    """Top model: a head per client, concatenation, then a shared trunk.

    ``task`` is ``"multiclass"`` (cross-entropy on logits) or ``"binary"``
    (trunk ends in a sigmoid, BCE).
    """

    def __init__(self, heads: dict[int, MlpModel], trunk: MlpModel, labels: np.ndarray,
                 task: str = "multiclass", optimizer: str = "adam"):
        if sum(h.out_width for h in heads.values()) != trunk.in_width:
            raise ProtocolError("trunk input width must equal the sum of head output widths")
        self.heads = dict(sorted(heads.items()))
        self.trunk = trunk
        self.labels = np.asarray(labels)
        self.task = task
        self.optimizers = {cid: make_optimizer(optimizer) for cid in self.heads}
        self.trunk_optimizer = make_optimizer(optimizer)

    def _loss(self, out: np.ndarray, y: np.ndarray):
        if self.task == "binary":
            return loss_bce(out, y)
        return loss_cross_entropy(out, y)

    def forward_loss(self, outputs: Sequence[IntermediateOutput], rows: np.ndarray):
        """Full top-model forward/backward at the current parameters (no update)."""
        by_id = {o.client_id: o for o in outputs}
        if sorted(by_id) != list(self.heads):
            missing = sorted(set(self.heads) - set(by_id))
            raise ProtocolError(f"missing outputs from clients {missing}" if missing else "unexpected client outputs")
        sizes = {o.features.shape[0] for o in outputs}
        if len(sizes) != 1:
            raise ProtocolError(f"batch misalignment: row counts {sorted(sizes)}")
        for o in outputs:
            if not np.array_equal(o.rows, rows):
                raise ProtocolError(f"client {o.client_id} rows do not follow the shared batch plan")
        head_traces = {cid: self.heads[cid].forward(by_id[cid].features, train=True) for cid in self.heads}
        widths = [self.heads[cid].out_width for cid in self.heads]
        z = np.concatenate([head_traces[cid].output for cid in self.heads], axis=1)
        trunk_trace = self.trunk.forward(z, train=True)
        y = self.labels[rows]
        loss, dout = self._loss(trunk_trace.output, y)
        trunk_grads = self.trunk.backward(trunk_trace, dout)
        splits = np.split(trunk_grads.input_grad, np.cumsum(widths)[:-1], axis=1)
        head_grads = {cid: self.heads[cid].backward(head_traces[cid], dz) for cid, dz in zip(self.heads, splits)}
        return loss, trunk_trace.output, y, trunk_grads, head_grads

    def top_step(self, outputs: Sequence[IntermediateOutput], rows: np.ndarray, lr: float) -> TopStep:
        loss, out, y, trunk_grads, head_grads = self.forward_loss(outputs, rows)
        epoch, bi = outputs[0].epoch, outputs[0].batch_index
        # feedback is taken before the top model moves
        feedback = {cid: GradFeedback(cid, epoch, bi, hg.input_grad) for cid, hg in head_grads.items()}
        for cid in self.heads:
            self.optimizers[cid].step(self.heads[cid], GradBundle(head_grads[cid].param_grads), lr)
        self.trunk_optimizer.step(self.trunk, GradBundle(trunk_grads.param_grads), lr)
        return TopStep(loss, int(np.sum(predict_labels(out, self.task) == y)), feedback)

    def predict(self, features: dict[int, np.ndarray]) -> np.ndarray:
        z = np.concatenate([self.heads[cid](features[cid]) for cid in self.heads], axis=1)
        return self.trunk(z)


def predict_labels(out: np.ndarray, task: str) -> np.ndarray:
    if task == "binary":
        return (out[:, 0] >= 0.5).astype(np.int64)
    return out.argmax(axis=1)


# training loop ------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    eval_accuracy: float
    wall_time: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    eval_metric: str = "accuracy"

    def __len__(self):
        return len(self.records)


class Defense(Protocol):
    """Client-side hooks the loop calls around each synchronous step."""

    def before_upload(self, client: ClientState, rows: np.ndarray, epoch: int, batch_index: int) -> None: ...

    def client_gradient(self, client: ClientState, grads: GradBundle) -> GradBundle: ...

    def end_epoch(self, epoch: int) -> None: ...


FeatureTap = Callable[[IntermediateOutput], None]


@dataclass
class VflSystem:
    clients: list[ClientState]
    coordinator: CoordinatorState
    train_rows: np.ndarray
    eval_rows: np.ndarray
    use_auc: bool = False

    def eval_score(self, rows: np.ndarray | None = None) -> float:
        rows = self.eval_rows if rows is None else rows
        feats = {c.id: c.model(c.shard[rows]) for c in self.clients}
        out = self.coordinator.predict(feats)
        y = self.coordinator.labels[rows]
        if self.coordinator.task == "binary" and self.use_auc:
            return auc_pr(out[:, 0], y)
        return accuracy(predict_labels(out, self.coordinator.task), y)


def run_epoch(system: VflSystem, plan: BatchPlan, epoch: int, lr: float,
              defense: Defense | None = None, tap: FeatureTap | None = None) -> tuple[float, float]:
    """One pass of the synchronous loop over ``plan``; returns (mean loss, accuracy)."""
    total_loss = 0.0
    correct = 0
    seen = 0
    for bi, local in enumerate(plan):
        rows = system.train_rows[local]
        if defense is not None:
            for c in system.clients:
                defense.before_upload(c, rows, epoch, bi)
        outputs = [c.client_forward(rows, epoch, bi) for c in system.clients]
        if tap is not None:
            for o in outputs:
                tap(o)
        step = system.coordinator.top_step(outputs, rows, lr)
        for c in sorted(system.clients, key=lambda c: c.id):
            grads = c.local_gradient(step.feedback[c.id])
            if defense is not None:
                grads = defense.client_gradient(c, grads)
            c.apply(grads, lr)
        total_loss += step.loss * len(rows)
        correct += step.correct
        seen += len(rows)
    if defense is not None:
        defense.end_epoch(epoch)
    return total_loss / max(seen, 1), correct / max(seen, 1)


def train_vfl(system: VflSystem, epochs: int, batch_size: int, lr: float, seed: int,
              defense: Defense | None = None, tap: FeatureTap | None = None,
              on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainHistory:
    """Run ``epochs`` synchronous epochs; batch plans are drawn from ``seed``."""
    history = TrainHistory(eval_metric="auc_pr" if system.use_auc else "accuracy")
    plan_rng = np.random.default_rng(seed)
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        plan = make_batches(len(system.train_rows), batch_size, seed=plan_rng.integers(2**63), shuffle=True)
        loss, acc = run_epoch(system, plan, epoch, lr, defense, tap)
        rec = EpochRecord(epoch, loss, acc, system.eval_score(), time.perf_counter() - t0)
        history.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return history
