"""Minimal dense-network substrate (float64, numpy)."""

from vflpriv.nn.gradcheck import gradient_check
from vflpriv.nn.layers import BatchNorm, Linear, ReLU, Sigmoid, Tanh
from vflpriv.nn.losses import loss_bce, loss_cross_entropy, loss_mse, softmax
from vflpriv.nn.model import (
    ForwardTrace,
    GradBundle,
    MlpModel,
    build_mlp,
    mlp_backward,
    mlp_forward,
    param_sq_distance,
)
from vflpriv.nn.optim import Adam, Sgd, make_optimizer, optimizer_step

__all__ = [
    "Adam", "BatchNorm", "ForwardTrace", "GradBundle", "Linear", "MlpModel", "ReLU",
    "Sgd", "Sigmoid", "Tanh", "build_mlp", "gradient_check", "loss_bce",
    "loss_cross_entropy", "loss_mse", "make_optimizer", "mlp_backward", "mlp_forward",
    "optimizer_step", "param_sq_distance", "softmax",
]
