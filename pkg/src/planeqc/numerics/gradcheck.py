"""Central finite-difference gradient checks (run under f64)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, current_tape, no_grad


def numerical_gradient(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    grads = []
    for t in inputs:
        g = np.zeros(t.shape, dtype=np.float64)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                up = fn(*inputs).item()
                flat[i] = orig - h
                down = fn(*inputs).item()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_gradient(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    current_tape().clear()
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    backward(fn(*inputs))
    return [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]


def max_relative_error(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest normwise relative error over all inputs.

    Per input the error is ``max|analytic - numeric| / max(max|numeric|, 1e-8)``.
    """
    ana = analytic_gradient(fn, inputs)
    num = numerical_gradient(fn, inputs, h)
    worst = 0.0
    for a, n in zip(ana, num):
        scale = max(float(np.max(np.abs(n), initial=0.0)), float(np.max(np.abs(a), initial=0.0)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n), initial=0.0)) / scale)
    return worst
