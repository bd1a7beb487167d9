"""Binary model checkpoints.

Layout: the magic line ``VFLPRIV1``, one JSON line describing the layer
stack, then little-endian float64 parameters in flatten order followed by
BatchNorm buffers in layer order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from vflpriv.errors import ShapeError
from vflpriv.nn.layers import layer_from_descriptor
from vflpriv.nn.model import MlpModel

MAGIC = b"VFLPRIV1"


def dumps(model: MlpModel) -> bytes:
    header = {"in_width": model.in_width, "layers": model.architecture()}
    flat = model.flatten()
    bufs = model.buffers()
    buf = np.concatenate([b.ravel() for b in bufs]) if bufs else np.zeros(0)
    body = np.concatenate([flat, buf]).astype("<f8").tobytes()
    return MAGIC + b"\n" + json.dumps(header, sort_keys=True).encode() + b"\n" + body


def loads(data: bytes) -> MlpModel:
    magic, _, rest = data.partition(b"\n")
    if magic != MAGIC:
        raise ShapeError("not a VFLPRIV1 checkpoint")
    header_line, _, body = rest.partition(b"\n")
    header = json.loads(header_line)
    layers = [layer_from_descriptor(d) for d in header["layers"]]
    model = MlpModel(layers, width=header["in_width"])
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    n = model.n_params
    n_buf = sum(b.size for b in model.buffers())
    if values.size != n + n_buf:
        raise ShapeError(f"checkpoint holds {values.size} values, architecture needs {n + n_buf}")
    model.unflatten(values[:n])
    offset = n
    for layer in model.layers:
        for k, b in layer.buffers.items():
            layer.buffers[k] = values[offset:offset + b.size].reshape(b.shape).copy()
            offset += b.size
    return model


def save(model: MlpModel, path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path) -> MlpModel:
    return loads(Path(path).read_bytes())
