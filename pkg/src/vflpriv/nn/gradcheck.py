"""Central finite-difference verification of backprop."""

from __future__ import annotations

import numpy as np

from vflpriv.errors import DomainError
from vflpriv.nn.layers import ReLU
from vflpriv.nn.losses import get_loss
from vflpriv.nn.model import MlpModel, build_mlp


def model_loss(model: MlpModel, x: np.ndarray, loss: str, target) -> float:
    return get_loss(loss)(model.forward(x, train=True).output, target)[0]


def analytic_grad(model: MlpModel, x: np.ndarray, loss: str, target) -> np.ndarray:
    trace = model.forward(x, train=True)
    _, upstream = get_loss(loss)(trace.output, target)
    return model.backward(trace, upstream).flat()


def numeric_grad(model: MlpModel, x: np.ndarray, loss: str, target, h: float = 1e-5) -> np.ndarray:
    theta = model.flatten()
    probe = model.copy()
    out = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + h
        probe.unflatten(theta)
        up = model_loss(probe, x, loss, target)
        theta[i] = orig - h
        probe.unflatten(theta)
        down = model_loss(probe, x, loss, target)
        theta[i] = orig
        out[i] = (up - down) / (2 * h)
    return out


# central differences at h=1e-5 resolve a gradient only to about 1e-11 absolute,
# so coordinates far below this floor are compared absolutely
GRAD_FLOOR = 1e-7


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0


def gradient_check(model: MlpModel, x: np.ndarray, loss: str, target, h: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences over all parameters.

    The denominator is ``max(|analytic|, |numeric|, 1e-7)`` per coordinate.
    Works on copies, so BatchNorm running buffers of ``model`` are untouched.
    """
    if not 0 < h <= 1e-2:
        raise DomainError("h must lie in (0, 1e-2]")
    a = analytic_grad(model.copy(), x, loss, target)
    n = numeric_grad(model, x, loss, target, h)
    return relative_error(a, n)


def kink_margin(model: MlpModel, x: np.ndarray) -> float:
    """Smallest |input| seen by any ReLU layer on ``x``."""
    margin = np.inf
    h = x
    for layer in model.layers:
        if isinstance(layer, ReLU):
            margin = min(margin, float(np.abs(h).min()))
        h, _ = layer.forward(h, train=True)
    return margin


def random_case(rng: np.random.Generator, activation: str, loss: str, max_depth: int = 3, max_width: int = 16,
                batch: int = 8):
    """A random small network, input batch and target for ``loss``."""
    depth = int(rng.integers(1, max_depth + 1))
    n_in = int(rng.integers(2, max_width + 1))
    spec = []
    for i in range(depth):
        last = i == depth - 1
        width = 1 if last and loss == "bce" else int(rng.integers(2, max_width + 1))
        spec.append(f"linear:{width}")
        if not last:
            spec.append(activation)
    if loss == "bce":
        spec.append("sigmoid")
    model = build_mlp(n_in, spec, rng)
    # keep ReLU inputs away from the kink, where differences straddle two slopes
    for _ in range(100):
        x = rng.normal(size=(batch, n_in))
        if kink_margin(model, x) > 1e-3:
            break
    if loss == "mse":
        target = rng.normal(size=(batch, model.out_width))
    elif loss == "bce":
        target = rng.integers(0, 2, batch)
    else:
        target = rng.integers(0, model.out_width, batch)
    return model, x, target, spec


def gradcheck_sweep(n_cases: int = 24, seed: int = 0, h: float = 1e-5) -> list[dict]:
    """Check backprop on ``n_cases`` random architectures cycling activations and losses."""
    rng = np.random.default_rng(seed)
    acts, losses = ("relu", "tanh", "sigmoid"), ("mse", "bce", "ce")
    out = []
    for i in range(n_cases):
        act, loss = acts[i % 3], losses[(i // 3) % 3]
        model, x, target, spec = random_case(rng, act, loss)
        out.append({"layers": spec, "loss": loss, "max_rel_error": gradient_check(model, x, loss, target, h)})
    return out
