"""Model zoo evaluated at a flat parameter vector.

A network never owns its weights. Every evaluation takes the masked vector
``z = m * theta`` of length ``n`` and slices it into per-layer tensors
through the network's layout, so masking, pruning and the bi-level updates
all operate on plain 1-d arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import NumericError, ShapeError, Tape

ARCHITECTURES = ("mlp-tiny", "mlp-small", "cnn-tiny")


@dataclass(frozen=True)
class ParamSlot:
    """One parameter tensor inside the flat vector."""

    name: str
    layer: int
    kind: str  # "weight" | "bias"
    offset: int
    shape: tuple
    fan_in: int

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def stop(self):
        return self.offset + self.size


@dataclass(frozen=True)
class Layer:
    kind: str  # dense | conv | relu | tanh | flatten
    shape: tuple = ()  # dense: (in, out); conv: (out, in, k, k)


@dataclass(frozen=True)
class Network:
    arch: str
    layers: tuple
    input_shape: tuple
    num_classes: int
    layout: tuple = field(init=False)

    def __post_init__(self):
        slots, offset = [], 0
        for i, layer in enumerate(self.layers):
            if layer.kind == "dense":
                fan_in, out = layer.shape
                shapes = [("weight", layer.shape), ("bias", (out,))]
            elif layer.kind == "conv":
                out, cin, k, _ = layer.shape
                fan_in = cin * k * k
                shapes = [("weight", layer.shape), ("bias", (out,))]
            else:
                continue
            for kind, shape in shapes:
                slot = ParamSlot(f"{i}.{kind}", i, kind, offset, tuple(shape), fan_in)
                slots.append(slot)
                offset += slot.size
        object.__setattr__(self, "layout", tuple(slots))

    @property
    def n(self) -> int:
        return self.layout[-1].stop if self.layout else 0

    def slot(self, layer, kind):
        for s in self.layout:
            if s.layer == layer and s.kind == kind:
                return s
        raise KeyError((layer, kind))


def build_network(arch: str, input_dim: int = 2, num_classes: int = 2) -> Network:
    """Build one of the fixed architectures.

    ``input_dim`` is ignored for ``mlp-tiny`` (always 2-8-2) and
    ``cnn-tiny`` (always a 1x8x8 input).
    """
    if arch == "mlp-tiny":
        layers = (Layer("dense", (2, 8)), Layer("tanh"), Layer("dense", (8, 2)))
        return Network(arch, layers, (2,), 2)
    if arch == "mlp-small":
        layers = (
            Layer("dense", (input_dim, 32)), Layer("relu"),
            Layer("dense", (32, 32)), Layer("relu"),
            Layer("dense", (32, num_classes)),
        )
        return Network(arch, layers, (input_dim,), num_classes)
    if arch == "cnn-tiny":
        layers = (
            Layer("conv", (8, 1, 3, 3)), Layer("relu"),
            Layer("conv", (8, 8, 3, 3)), Layer("relu"),
            Layer("flatten"),
            Layer("dense", (8 * 8 * 8, num_classes)),
        )
        return Network(arch, layers, (1, 8, 8), num_classes)
    raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


def forward(net: Network, z: np.ndarray, inputs: np.ndarray, tape: Tape):
    """Record the network on ``tape``. Returns (logits, parameter leaves)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (net.n,):
        raise ShapeError(f"{net.arch}: parameter vector has shape {z.shape}, expected ({net.n},)")
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape[1:] != net.input_shape:
        if net.layers[0].kind == "dense" and int(np.prod(inputs.shape[1:])) == net.input_shape[0]:
            inputs = inputs.reshape(inputs.shape[0], -1)
        else:
            raise ShapeError(
                f"{net.arch}: input shape {inputs.shape[1:]} != expected {net.input_shape}")
    leaves = [tape.leaf(z[s.offset:s.stop].reshape(s.shape)) for s in net.layout]
    by_layer = {}
    for s, leaf in zip(net.layout, leaves):
        by_layer.setdefault(s.layer, {})[s.kind] = leaf
    h = tape.constant(inputs)
    for i, layer in enumerate(net.layers):
        try:
            if layer.kind == "dense":
                p = by_layer[i]
                h = T.bias_add(T.matmul(h, p["weight"]), p["bias"])
            elif layer.kind == "conv":
                p = by_layer[i]
                h = T.bias_add(T.conv2d(h, p["weight"], pad=1), p["bias"])
            elif layer.kind == "relu":
                h = T.relu(h)
            elif layer.kind == "tanh":
                h = T.tanh(h)
            elif layer.kind == "flatten":
                h = T.flatten(h)
        except NumericError as exc:
            raise NumericError(f"{net.arch} layer {i} ({layer.kind}): {exc}",
                               op=exc.op, layer=i) from exc
    return h, leaves


def _loss_tape(net, z, batch):
    if len(batch.labels) == 0:
        raise ValueError("empty batch")
    tape = Tape()
    logits, leaves = forward(net, z, batch.inputs, tape)
    try:
        loss = T.softmax_cross_entropy(logits, batch.labels)
    except NumericError as exc:
        raise NumericError(f"{net.arch} loss: {exc}", op=exc.op, layer=len(net.layers)) from exc
    return tape, loss, leaves


def loss_at(net: Network, z, batch) -> float:
    """Mean cross-entropy of ``batch`` at the masked parameter vector ``z``."""
    _, loss, _ = _loss_tape(net, z, batch)
    return float(loss.data)


def loss_and_grad(net: Network, z, batch):
    tape, loss, _ = _loss_tape(net, z, batch)
    grads = tape.backward(loss)
    return float(loss.data), np.concatenate([g.ravel() for g in grads])


def grad_z(net: Network, z, batch) -> np.ndarray:
    """Gradient of the mean loss with respect to every entry of ``z``."""
    return loss_and_grad(net, z, batch)[1]


def logits(net: Network, z, inputs) -> np.ndarray:
    out, _ = forward(net, z, inputs, Tape())
    return out.data


def predict(net: Network, z, inputs, chunk=1024) -> np.ndarray:
    # argmax returns the lowest index on ties
    parts = [np.argmax(logits(net, z, inputs[i:i + chunk]), axis=1)
             for i in range(0, len(inputs), chunk)]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def accuracy(net: Network, z, dataset) -> float:
    if len(dataset.labels) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(predict(net, z, dataset.inputs) == dataset.labels))


def init_params(net: Network, seed: int) -> np.ndarray:
    """Kaiming-normal weights, std sqrt(2 / fan_in); biases uniform in
    +-1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    theta = np.empty(net.n)
    for s in net.layout:
        if s.kind == "weight":
            theta[s.offset:s.stop] = rng.normal(0.0, np.sqrt(2.0 / s.fan_in), s.size)
        else:
            bound = 1.0 / np.sqrt(s.fan_in)
            theta[s.offset:s.stop] = rng.uniform(-bound, bound, s.size)
    return theta


@dataclass
class Snapshot:
    epoch: int
    params: np.ndarray
    rng_state: dict

    def copy(self):
        return Snapshot(self.epoch, self.params.copy(), dict(self.rng_state))


CKPT_MAGIC = b"BIPCKPT1"
MASK_TAG = b"MASK"


class CheckpointFormatError(ValueError):
    pass


def write_checkpoint(path, net: Network, params, mask=None):
    """Parameters are stored as float32; reading back loses precision."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (net.n,):
        raise ShapeError(f"checkpoint: params shape {params.shape}, expected ({net.n},)")
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<I", len(net.layout))
    for s in net.layout:
        out += struct.pack("<I", len(s.shape))
        out += struct.pack(f"<{len(s.shape)}I", *s.shape)
    out += params.astype("<f4").tobytes()
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != (net.n,):
            raise ShapeError(f"checkpoint: mask shape {mask.shape}, expected ({net.n},)")
        out += MASK_TAG + mask.astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def read_checkpoint(path):
    """Return (shapes, params float64, mask or None)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(nbytes, what):
        nonlocal pos
        if pos + nbytes > len(buf):
            raise CheckpointFormatError(f"truncated checkpoint reading {what} at byte {pos}")
        chunk = buf[pos:pos + nbytes]
        pos += nbytes
        return chunk

    if take(8, "magic") != CKPT_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic at byte 0")
    (count,) = struct.unpack("<I", take(4, "layer count"))
    shapes = []
    for _ in range(count):
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shapes.append(struct.unpack(f"<{rank}I", take(4 * rank, "dims")))
    n = int(sum(np.prod(s) for s in shapes))
    params = np.frombuffer(take(4 * n, "parameters"), dtype="<f4").astype(np.float64)
    mask: Optional[np.ndarray] = None
    if pos < len(buf):
        if take(4, "mask tag") != MASK_TAG:
            raise CheckpointFormatError(f"bad mask tag at byte {pos - 4}")
        mask = np.frombuffer(take(n, "mask"), dtype=np.uint8).astype(np.int8)
        if pos != len(buf):
            raise CheckpointFormatError(f"trailing bytes after mask at byte {pos}")
    return shapes, params, mask
