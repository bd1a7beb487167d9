"""First-order optimizers that update a model's parameters in place."""

from __future__ import annotations

import numpy as np

from vflpriv.errors import DomainError, ShapeError
from vflpriv.nn.model import GradBundle, MlpModel


class Sgd:
    kind = "sgd"

    def __init__(self):
        self.t = 0

    def step(self, model: MlpModel, grads: GradBundle, lr: float) -> None:
        _check(model, grads)
        for p, g in zip(model.parameters(), grads.param_grads):
            p -= lr * g
        self.t += 1

    def copy(self) -> "Sgd":
        new = Sgd()
        new.t = self.t
        return new


class Adam:
    """Adam with bias-corrected moments; buffers are allocated on first step."""

    kind = "adam"

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, model: MlpModel, grads: GradBundle, lr: float) -> None:
        _check(model, grads)
        params = model.parameters()
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads.param_grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def copy(self) -> "Adam":
        new = Adam(self.beta1, self.beta2, self.eps)
        new.t = self.t
        if self.m is not None:
            new.m = [a.copy() for a in self.m]
            new.v = [a.copy() for a in self.v]
        return new


def _check(model: MlpModel, grads: GradBundle) -> None:
    shapes = [g.shape for g in grads.param_grads]
    if shapes != model.param_shapes():
        raise ShapeError(f"gradient shapes {shapes} do not match parameters {model.param_shapes()}")


def make_optimizer(kind: str):
    if kind == "adam":
        return Adam()
    if kind == "sgd":
        return Sgd()
    raise DomainError(f"unknown optimizer {kind!r}")


def optimizer_step(state, model: MlpModel, grads: GradBundle, lr: float) -> None:
    state.step(model, grads, lr)
