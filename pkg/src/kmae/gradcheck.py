"""Central finite-difference checks for the autodiff engine (double precision)."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, no_grad

DEFAULT_H = 1e-5
# gradients smaller than this are compared in absolute terms
REL_FLOOR = 1e-5


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(fn, tensors, h: float = DEFAULT_H, max_coords: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` maps nothing to a scalar Tensor and reads the (float64) ``tensors``
    in place.  With ``max_coords`` only a random subset of entries of each
    tensor is perturbed.
    """
    tensors = list(tensors)
    for t in tensors:
        if t.data.dtype != np.float64:
            raise TypeError("gradient checks need float64 tensors")
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        num = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            with no_grad():
                flat[c] = orig + h
                fp = float(fn().data)
                flat[c] = orig - h
                fm = float(fn().data)
            flat[c] = orig
            num[j] = (fp - fm) / (2 * h)
        err = relative_error(ga.reshape(-1)[coords], num)
        worst = max(worst, float(err.max(initial=0.0)))
    for t in tensors:
        t.grad = None
    return worst


def param_tensors(module) -> list[Tensor]:
    return [p for _, p in module.named_parameters()]
