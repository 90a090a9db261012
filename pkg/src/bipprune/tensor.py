"""Dense float64 tensors with a reverse-mode tape.

Every primitive records its parents and a vector-Jacobian product on the
tape that produced its inputs. The primitive set is closed: matmul, conv2d,
bias_add, relu, tanh, flatten, softmax_cross_entropy, mul, add and sum.
Broadcasting exists only in :func:`bias_add`.

Example::

    tape = Tape()
    x = tape.leaf([[1.0, 2.0]])
    w = tape.leaf([[0.5], [-1.0]])
    y = sum_(tanh(matmul(x, w)))
    gx, gw = tape.backward(y)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes do not fit the primitive's signature."""


class NumericError(ArithmeticError):
    """A primitive produced NaN or Inf."""

    def __init__(self, message, op=None, layer=None):
        super().__init__(message)
        self.op = op
        self.layer = layer


class TapeError(RuntimeError):
    """The tape was used out of order."""


class Tensor:
    """Immutable value living on a tape. ``data`` must not be mutated."""

    __slots__ = ("data", "tape", "index")

    def __init__(self, data: np.ndarray, tape: "Tape", index: int):
        self.data = data
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.tape.nodes[self.index].op!r})"


@dataclass
class _Node:
    op: str
    parents: tuple
    vjp: Optional[Callable]
    requires_grad: bool


class Tape:
    """Ordered record of primitive ops. Confined to a single thread."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: list[int] = []
        self._leaf_shapes: dict[int, tuple] = {}
        self.visits = 0

    def leaf(self, data, requires_grad=True) -> Tensor:
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "leaf")
        self.nodes.append(_Node("leaf", (), None, requires_grad))
        idx = len(self.nodes) - 1
        if requires_grad:
            self._leaves.append(idx)
            self._leaf_shapes[idx] = arr.shape
        return Tensor(arr, self, idx)

    def constant(self, data) -> Tensor:
        return self.leaf(data, requires_grad=False)

    def _record(self, op, value, parents: Sequence[Tensor], vjp) -> Tensor:
        _check_finite(value, op)
        for p in parents:
            if p.tape is not self:
                raise TapeError(f"{op}: operand belongs to a different tape")
        req = any(self.nodes[p.index].requires_grad for p in parents)
        self.nodes.append(_Node(op, tuple(p.index for p in parents), vjp, req))
        return Tensor(value, self, len(self.nodes) - 1)

    def backward(self, output: Tensor, seed=None) -> list:
        """Gradients of ``output`` (or ``seed . output``) for every
        trainable leaf, in creation order."""
        if output.tape is not self:
            raise TapeError("backward: output was not produced on this tape")
        if self.nodes[output.index].op == "leaf":
            raise TapeError("backward called before any forward op was recorded")
        if seed is None:
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != output.shape:
                raise ShapeError(
                    f"backward: seed shape {seed.shape} != output shape {output.shape}")
        grads: dict[int, np.ndarray] = {output.index: seed}
        self.visits = 0
        for idx in range(output.index, -1, -1):
            g = grads.pop(idx, None)
            node = self.nodes[idx]
            if g is None or not node.requires_grad:
                continue
            self.visits += 1
            if node.vjp is None:
                grads[idx] = g  # leaf: keep it
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not self.nodes[parent].requires_grad:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + pg
                else:
                    grads[parent] = pg
        # leaves the output does not depend on get zero gradients
        return [grads.get(i, np.zeros(self._leaf_shapes[i])) for i in self._leaves]


def _check_finite(value, op):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{op}: produced non-finite values", op=op)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.data, b.data

    def vjp(g):
        return g @ bv.T, av.T @ g

    return a.tape._record("matmul", av @ bv, (a, b), vjp)


def conv2d(x: Tensor, w: Tensor, pad: int = 1) -> Tensor:
    """Stride-1 cross-correlation with ``pad`` zeros on each spatial side."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} does not fit kernel {w.shape}")
    if x.shape[2] + 2 * pad < w.shape[2] or x.shape[3] + 2 * pad < w.shape[3]:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xv = np.ascontiguousarray(x.data)
    wv = np.ascontiguousarray(w.data)
    out = kernels.conv2d_forward(xv, wv, pad)

    def vjp(g):
        return kernels.conv2d_backward(xv, wv, np.ascontiguousarray(g), pad)

    return x.tape._record("conv2d", out, (x, w), vjp)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature (2-d input) or per-channel (4-d input) bias."""
    if b.data.ndim != 1 or x.data.ndim not in (2, 4) or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias_add: bias {b.shape} does not fit input {x.shape}")
    if x.data.ndim == 2:
        out = x.data + b.data

        def vjp(g):
            return g, g.sum(axis=0)
    else:
        out = x.data + b.data[None, :, None, None]

        def vjp(g):
            return g, g.sum(axis=(0, 2, 3))

    return x.tape._record("bias_add", out, (x, b), vjp)


def relu(x: Tensor) -> Tensor:
    active = x.data > 0  # subgradient 0 at the kink

    def vjp(g):
        return (g * active,)

    return x.tape._record("relu", np.where(active, x.data, 0.0), (x,), vjp)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return x.tape._record("tanh", y, (x,), vjp)


def flatten(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeError(f"flatten: need a batch axis, got shape {x.shape}")
    shape = x.shape

    def vjp(g):
        return (g.reshape(shape),)

    return x.tape._record("flatten", x.data.reshape(shape[0], -1), (x,), vjp)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError("softmax_cross_entropy: label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.shape[0])
    loss = np.mean(logsum - z[rows, labels])
    probs = np.exp(z - logsum[:, None])
    batch = labels.shape[0]

    def vjp(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (g / batch),)

    return logits.tape._record("softmax_cross_entropy", np.asarray(loss), (logits,), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    av, bv = a.data, b.data

    def vjp(g):
        return g * bv, g * av

    return a.tape._record("mul", av * bv, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def vjp(g):
        return g, g

    return a.tape._record("add", a.data + b.data, (a, b), vjp)


def sum_(x: Tensor) -> Tensor:
    shape = x.shape

    def vjp(g):
        return (np.full(shape, float(g)),)

    return x.tape._record("sum", np.asarray(x.data.sum()), (x,), vjp)
