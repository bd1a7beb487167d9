"""Sequential MLP container, reverse-mode gradients and parameter views."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from vflpriv.errors import DomainError, ShapeError
from vflpriv.nn.layers import ACTIVATIONS, BatchNorm, Layer, Linear


@dataclass
class ForwardTrace:
    caches: list
    output: np.ndarray
    input_shape: tuple = ()


@dataclass
class GradBundle:
    param_grads: list[np.ndarray]
    input_grad: np.ndarray | None = None

    def scaled(self, factor: float) -> "GradBundle":
        return GradBundle([g * factor for g in self.param_grads],
                          None if self.input_grad is None else self.input_grad * factor)

    def __add__(self, other: "GradBundle") -> "GradBundle":
        grads = [a + b for a, b in zip(self.param_grads, other.param_grads)]
        ig = None
        if self.input_grad is not None and other.input_grad is not None:
            ig = self.input_grad + other.input_grad
        return GradBundle(grads, ig)

    def flat(self) -> np.ndarray:
        if not self.param_grads:
            return np.zeros(0)
        return np.concatenate([g.ravel() for g in self.param_grads])


class MlpModel:
    """Ordered layer stack.

    An empty stack is the identity map on ``width`` columns, which is handy
    for attack and defense tests against an unprotected client.
    """

    def __init__(self, layers: Sequence[Layer], width: int | None = None):
        self.layers = list(layers)
        widths = [w for layer in self.layers for w in (layer.in_width, layer.out_width) if w is not None]
        if not widths and width is None:
            raise ShapeError("a model without sized layers needs an explicit width")
        self._check_chain(width)
        first = next((l.in_width for l in self.layers if l.in_width is not None), None)
        self.in_width = first if first is not None else int(width)
        last = None
        for layer in self.layers:
            if layer.out_width is not None:
                last = layer.out_width
        self.out_width = last if last is not None else self.in_width

    def _check_chain(self, width):
        current = width
        for layer in self.layers:
            if layer.in_width is not None:
                if current is not None and current != layer.in_width:
                    raise ShapeError(f"layer {layer.kind} expects width {layer.in_width}, previous emits {current}")
                current = layer.out_width

    # parameter views -----------------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params.values()]

    def param_shapes(self) -> list[tuple]:
        return [p.shape for p in self.parameters()]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def flatten(self) -> np.ndarray:
        ps = self.parameters()
        if not ps:
            return np.zeros(0)
        return np.concatenate([p.ravel() for p in ps])

    def unflatten(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ShapeError(f"expected flat vector of {self.n_params}, got {vec.shape}")
        offset = 0
        for layer in self.layers:
            for name, p in layer.params.items():
                layer.params[name] = vec[offset:offset + p.size].reshape(p.shape).copy()
                offset += p.size

    def buffers(self) -> list[np.ndarray]:
        return [b for layer in self.layers for b in layer.buffers.values()]

    def copy(self) -> "MlpModel":
        new = object.__new__(MlpModel)
        new.layers = [layer.copy() for layer in self.layers]
        new.in_width = self.in_width
        new.out_width = self.out_width
        return new

    def load_state(self, other: "MlpModel") -> None:
        """Overwrite parameters and buffers from an architecture-identical model."""
        if self.architecture() != other.architecture():
            raise ShapeError("architecture mismatch")
        for mine, theirs in zip(self.layers, other.layers):
            mine.params = {k: v.copy() for k, v in theirs.params.items()}
            mine.buffers = {k: v.copy() for k, v in theirs.buffers.items()}

    def architecture(self) -> list[dict]:
        return [layer.describe() for layer in self.layers]

    def __repr__(self) -> str:
        inner = ", ".join(str(d) for d in self.architecture())
        return f"MlpModel(in={self.in_width}, out={self.out_width}, [{inner}])"

    # passes ----------------------------------------------------------------

    def forward(self, x: np.ndarray, train: bool = True) -> ForwardTrace:
        return mlp_forward(self, x, train)

    def __call__(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return mlp_forward(self, x, train).output

    def backward(self, trace: ForwardTrace, upstream: np.ndarray) -> GradBundle:
        return mlp_backward(self, trace, upstream)


def mlp_forward(model: MlpModel, x: np.ndarray, train: bool = True) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"input must be a non-empty 2-D matrix, got shape {x.shape}")
    if x.shape[1] != model.in_width:
        raise ShapeError(f"model expects {model.in_width} input columns, got {x.shape[1]}")
    caches = []
    h = x
    for layer in model.layers:
        h, cache = layer.forward(h, train)
        caches.append(cache)
    if not model.layers:
        h = x.copy()
    return ForwardTrace(caches, h, x.shape)


def mlp_backward(model: MlpModel, trace: ForwardTrace, upstream: np.ndarray) -> GradBundle:
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != trace.output.shape:
        raise ShapeError(f"upstream {upstream.shape} does not match output {trace.output.shape}")
    grads_rev: list[list[np.ndarray]] = []
    d = upstream
    for layer, cache in zip(reversed(model.layers), reversed(trace.caches)):
        d, pg = layer.backward(cache, d)
        grads_rev.append(pg)
    param_grads = [g for pg in reversed(grads_rev) for g in pg]
    return GradBundle(param_grads, d)


def param_sq_distance(a: MlpModel, b: MlpModel) -> tuple[float, GradBundle]:
    """Half squared Euclidean distance between two parameter sets, and its gradient at ``a``."""
    if a.param_shapes() != b.param_shapes():
        raise ShapeError("param_sq_distance needs identical architectures")
    diffs = [pa - pb for pa, pb in zip(a.parameters(), b.parameters())]
    value = 0.5 * sum(float(np.sum(d * d)) for d in diffs)
    return value, GradBundle(diffs, None)


def build_mlp(in_width: int, spec: Sequence[str], rng: np.random.Generator) -> MlpModel:
    """Build a model from tokens such as ``["linear:512", "relu", "batchnorm"]``.

    ``linear:k`` maps the running width to ``k``; other tokens keep it.
    """
    layers: list[Layer] = []
    width = int(in_width)
    for token in spec:
        name, _, arg = token.strip().lower().partition(":")
        if name == "linear":
            out = int(arg)
            layers.append(Linear(width, out, rng=rng))
            width = out
        elif name == "batchnorm":
            layers.append(BatchNorm(width))
        elif name in ACTIVATIONS:
            layers.append(ACTIVATIONS[name]())
        else:
            raise DomainError(f"unknown layer token {token!r}")
    return MlpModel(layers, width=in_width)
