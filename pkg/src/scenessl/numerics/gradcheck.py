"""Central finite-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_gradient(f: Callable[[], Tensor], t: Tensor, step: float = 1e-3,
                       coords: Sequence[int] | None = None) -> np.ndarray:
    """Estimate d f / d t by central differences, perturbing ``t.data`` in place.

    Only the flat indices in ``coords`` are estimated when given; other
    entries of the result are NaN.
    """
    flat = t.data.reshape(-1)
    out = np.full(flat.shape, np.nan, dtype=np.float64)
    idx = range(flat.size) if coords is None else coords
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f().data)
            flat[i] = orig - step
            lo = float(f().data)
            flat[i] = orig
            out[i] = (hi - lo) / (2 * step)
    return out.reshape(t.shape)


def directional_derivative(f: Callable[[], Tensor], tensors: Sequence[Tensor], directions: Sequence[np.ndarray],
                           step: float = 1e-3) -> float:
    originals = [t.data.copy() for t in tensors]
    try:
        with no_grad():
            for t, o, d in zip(tensors, originals, directions):
                t.data = (o + step * d).astype(o.dtype)
            hi = float(f().data)
            for t, o, d in zip(tensors, originals, directions):
                t.data = (o - step * d).astype(o.dtype)
            lo = float(f().data)
    finally:
        for t, o in zip(tensors, originals):
            t.data = o
    return (hi - lo) / (2 * step)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``‖a − n‖ / max(‖a‖, ‖n‖)`` over the entries both arrays define."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(f: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-3) -> float:
    """Worst relative error between backprop and finite differences over ``tensors``."""
    for t in tensors:
        t.grad = None
    backward(f())
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        worst = max(worst, relative_error(analytic, numerical_gradient(f, t, step)))
    return worst
