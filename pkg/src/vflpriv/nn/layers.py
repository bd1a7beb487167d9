"""Dense layers with explicit forward/backward passes.

Every layer exposes ``forward(x, train) -> (y, cache)`` and
``backward(cache, dy) -> (dx, param_grads)``. Parameters live in an ordered
``params`` dict so a model can flatten them deterministically.
"""

from __future__ import annotations

import numpy as np

from vflpriv.errors import DomainError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Layer:
    kind = "layer"
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]

    def __init__(self) -> None:
        self.params = {}
        self.buffers = {}

    # widths are None for shape-preserving layers
    in_width: int | None = None
    out_width: int | None = None

    def forward(self, x: np.ndarray, train: bool = True):
        raise NotImplementedError

    def backward(self, cache, dy: np.ndarray):
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind}

    def copy(self) -> "Layer":
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.params = {k: v.copy() for k, v in self.params.items()}
        new.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return new


class Linear(Layer):
    """Affine map ``y = x W^T + b`` with ``W`` stored as (out, in)."""

    kind = "linear"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 weight=None, bias=None):
        super().__init__()
        self.in_width = int(n_in)
        self.out_width = int(n_out)
        if weight is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            s = np.sqrt(1.0 / n_in)
            weight = rng.uniform(-s, s, size=(n_out, n_in))
        if bias is None:
            bias = np.zeros(n_out)
        weight = np.array(weight, dtype=np.float64, copy=True)
        bias = np.array(bias, dtype=np.float64, copy=True).reshape(-1)
        if weight.shape != (n_out, n_in) or bias.shape != (n_out,):
            raise ShapeError(f"Linear({n_in},{n_out}) got weight {weight.shape}, bias {bias.shape}")
        self.params = {"weight": weight, "bias": bias}

    def forward(self, x, train=True):
        if x.shape[1] != self.in_width:
            raise ShapeError(f"Linear expects {self.in_width} input columns, got {x.shape[1]}")
        return x @ self.params["weight"].T + self.params["bias"], x

    def backward(self, cache, dy):
        x = cache
        dw = dy.T @ x
        db = dy.sum(axis=0)
        return dy @ self.params["weight"], [dw, db]

    def describe(self):
        return {"kind": self.kind, "in": self.in_width, "out": self.out_width}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=True):
        return np.maximum(x, 0.0), x

    def backward(self, cache, dy):
        # subgradient at 0 is 0
        return dy * (cache > 0), []


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x, train=True):
        y = np.tanh(x)
        return y, y

    def backward(self, cache, dy):
        return dy * (1.0 - cache * cache), []


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train=True):
        y = sigmoid(x)
        return y, y

    def backward(self, cache, dy):
        return dy * cache * (1.0 - cache), []


class BatchNorm(Layer):
    """Per-feature batch normalisation.

    Training mode normalises with batch statistics and folds them into the
    running estimates; evaluation mode uses the running estimates.
    """

    kind = "batchnorm"

    def __init__(self, width: int):
        super().__init__()
        self.in_width = self.out_width = int(width)
        self.params = {"scale": np.ones(width), "shift": np.zeros(width)}
        self.buffers = {"running_mean": np.zeros(width), "running_var": np.ones(width)}

    def forward(self, x, train=True):
        if x.shape[1] != self.in_width:
            raise ShapeError(f"BatchNorm expects {self.in_width} columns, got {x.shape[1]}")
        if train:
            if x.shape[0] < 2:
                raise DomainError("BatchNorm training needs a batch of at least 2 rows")
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            self.buffers["running_mean"] = BN_MOMENTUM * rm + (1 - BN_MOMENTUM) * mu
            self.buffers["running_var"] = BN_MOMENTUM * rv + (1 - BN_MOMENTUM) * var
        else:
            mu = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mu) * inv
        y = xhat * self.params["scale"] + self.params["shift"]
        return y, (xhat, inv, train)

    def backward(self, cache, dy):
        xhat, inv, train = cache
        dscale = (dy * xhat).sum(axis=0)
        dshift = dy.sum(axis=0)
        dxhat = dy * self.params["scale"]
        if train:
            n = dy.shape[0]
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv
        return dx, [dscale, dshift]

    def describe(self):
        return {"kind": self.kind, "width": self.in_width}


ACTIVATIONS = {"relu": ReLU, "tanh": Tanh, "sigmoid": Sigmoid}


def layer_from_descriptor(desc: dict) -> Layer:
    kind = desc["kind"]
    if kind == "linear":
        return Linear(desc["in"], desc["out"])
    if kind == "batchnorm":
        return BatchNorm(desc["width"])
    if kind in ACTIVATIONS:
        return ACTIVATIONS[kind]()
    raise DomainError(f"unknown layer kind {kind!r}")
