"""Tape-based reverse-mode automatic differentiation on float64 numpy arrays.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        loss = mse_loss(model(x), y)
    backward(loss, tape)

Outside a tape every op is a plain forward computation, which is what the
samplers and autoregressive generators use.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class GradientError(RuntimeError):
    pass


_node_ids = itertools.count()
_active_tapes: list["Tape"] = []


@dataclass(slots=True)
class Record:
    kind: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], tuple]

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(t.node_id for t in self.inputs)

    @property
    def output_id(self) -> int:
        return self.output.node_id


class Tape:
    """Ordered log of differentiable operations."""

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.pop()

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Tape | None:
    return _active_tapes[-1] if _active_tapes else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")
    # make ``ndarray <op> Tensor`` dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if not _is_number(other):
            raise TypeError("division is only defined by a constant scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) and not isinstance(x, bool)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, kind: str, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node_id = next(_node_ids)
    tape = active_tape()
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape.records.append(Record(kind, inputs, out, backward))
    return out


# -- elementwise ----------------------------------------------------------


def _bias_layout(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "bias_b"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "bias_a"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _sum_to_bias(g: np.ndarray, n: int) -> np.ndarray:
    return g.reshape(-1, n).sum(axis=0)


def add(a, b) -> Tensor:
    if _is_number(b):
        return shift(as_tensor(a), float(b))
    if _is_number(a):
        return shift(as_tensor(b), float(a))
    a, b = as_tensor(a), as_tensor(b)
    layout = _bias_layout(a, b)

    def backward(g):
        if layout == "same":
            return g, g
        if layout == "bias_b":
            return g, _sum_to_bias(g, b.shape[0])
        return _sum_to_bias(g, a.shape[0]), g

    return _make(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    if _is_number(b):
        return shift(as_tensor(a), -float(b))
    if _is_number(a):
        return shift(neg(as_tensor(b)), float(a))
    a, b = as_tensor(a), as_tensor(b)
    layout = _bias_layout(a, b)

    def backward(g):
        if layout == "same":
            return g, -g
        if layout == "bias_b":
            return g, -_sum_to_bias(g, b.shape[0])
        return _sum_to_bias(g, a.shape[0]), -g

    return _make(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    if _is_number(b):
        return scale(as_tensor(a), float(b))
    if _is_number(a):
        return scale(as_tensor(b), float(a))
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise product needs equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, "scale", (x,), lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    return _make(x.data + c, "shift", (x,), lambda g: (g,))


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, "neg", (x,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, "tanh", (x,), lambda g: (g * (1.0 - out * out),))


# -- linear algebra and layout ---------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands, or batched product of equal-batch 3-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    ok = (
        a.ndim == b.ndim
        and a.ndim in (2, 3)
        and a.shape[-1] == b.shape[-2]
        and a.shape[:-2] == b.shape[:-2]
    )
    if not ok:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, "matmul", (a, b), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), "transpose", (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    orig = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as err:
        raise ShapeError(f"cannot reshape {orig} to {tuple(shape)}") from err
    return _make(out, "reshape", (x,), lambda g: (g.reshape(orig),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"cannot concatenate {ts[0].shape} and {t.shape} along axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=ax), "concat", ts,
                 lambda g: tuple(np.split(g, bounds, axis=ax)))


def index(x: Tensor, key) -> Tensor:
    """Basic or integer-array indexing; the backward pass scatters with accumulation."""
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(x.data[key]), "index", (x,), backward)


# -- reductions and losses -------------------------------------------------


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _make(np.array(x.data.sum()), "sum", (x,), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(np.array(x.data.mean()), "mean", (x,), lambda g: (np.full(shape, float(g) / n),))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, "softmax", (x,), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        d = (2.0 * float(g) / n) * diff
        return d, -d

    return _make(np.array(np.mean(diff * diff)), "mse", (pred, target), backward)


# -- reverse pass ----------------------------------------------------------


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every grad-requiring leaf on ``tape``.

    Intermediate results only carry their cotangent until it has been propagated.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss was not recorded on a tape (no grad-requiring inputs)")
    pending: dict[int, tuple[Tensor, np.ndarray]] = {loss.node_id: (loss, np.ones_like(loss.data))}
    for rec in reversed(tape.records):
        entry = pending.pop(rec.output.node_id, None)
        if entry is None:
            continue
        _, g = entry
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            prev = pending.get(t.node_id)
            pending[t.node_id] = (t, gi if prev is None else prev[1] + gi)
    for t, g in pending.values():
        _accumulate(t, g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g
