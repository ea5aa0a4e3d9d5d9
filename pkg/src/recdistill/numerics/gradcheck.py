"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tape, Tensor, no_grad


class GradCheckError(ValueError):
    pass


def _value(out) -> float:
    val = float(out.data) if isinstance(out, Tensor) else float(out)
    if not np.isfinite(val):
        raise GradCheckError(f"objective is not finite ({val})")
    return val


def analytic_gradients(f: Callable[[], Tensor], params: list[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = f()
    _value(out)
    if isinstance(out, Tensor) and out.requires_grad:
        tape.backward(out)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def numeric_gradients(f: Callable[[], Tensor], params: list[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    grads = []
    with no_grad():
        for p in params:
            g = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = _value(f())
                flat[i] = orig - h
                down = _value(f())
                flat[i] = orig
                gflat[i] = (up - down) / (2.0 * h)
            grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(
    f: Callable[[], Tensor], params: Tensor | Iterable[Tensor], h: float = 1e-5
) -> float:
    """Max per-coordinate relative error between tape and central-difference gradients.

    ``f`` takes no arguments and must read ``params`` (which are perturbed in place).
    """
    params = [params] if isinstance(params, Tensor) else list(params)
    analytic = analytic_gradients(f, params)
    numeric = numeric_gradients(f, params, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            worst = max(worst, float(relative_error(a, n).max()))
    return worst
