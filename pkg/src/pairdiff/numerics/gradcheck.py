"""Central finite-difference checks for the autodiff ops."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numeric_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], index: int, h: float = 1e-3) -> np.ndarray:
    """Central differences of the scalar ``fn`` w.r.t. ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[index]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*[Tensor(a) for a in base]).item()
            flat[i] = orig - h
            fm = fn(*[Tensor(a) for a in base]).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def analytic_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*ts)
    backward(out, params=ts)
    return [t.grad for t in ts]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3) -> list[float]:
    """Relative error between analytic and central-difference gradients per input.

    Runs in float64 so the difference quotient is not swamped by rounding.
    """
    ana = analytic_grad(fn, arrays)
    return [relative_error(ana[i], numeric_grad(fn, arrays, i, h)) for i in range(len(arrays))]
