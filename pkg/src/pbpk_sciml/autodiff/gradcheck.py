"""Central finite-difference oracle for checking analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def numerical_grad(fn: Callable[[], Tensor], wrt: Tensor, step: float = 1e-5) -> np.ndarray:
    """d fn()/d wrt by central differences; ``fn`` is re-evaluated without a tape."""
    grad = np.zeros_like(wrt.data)
    flat = wrt.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn().item()
        flat[i] = orig - step
        fm = fn().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def analytic_grads(fn: Callable[[], Tensor], wrt: Sequence[Tensor]) -> list[np.ndarray]:
    for t in wrt:
        t.grad = None
    with Tape() as tape:
        out = fn()
    backward(out, tape)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[[], Tensor], wrt: Sequence[Tensor], step: float = 1e-5) -> float:
    """Largest relative error between backprop and finite differences over ``wrt``."""
    analytic = analytic_grads(fn, wrt)
    worst = 0.0
    for t, ga in zip(wrt, analytic):
        worst = max(worst, relative_error(ga, numerical_grad(fn, t, step)))
    return worst
