"""Central finite differences, the reference for autodiff gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """d fn / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 1e-8) -> float:
    """Largest relative discrepancy; tiny entries are compared absolutely.

    Elements where both gradients are below ``abs_floor`` in magnitude
    contribute their absolute difference instead of a ratio.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    small = scale < abs_floor
    rel = np.where(small, 0.0, diff / np.where(small, 1.0, scale))
    return float(max(rel.max(initial=0.0), diff[small].max(initial=0.0)))


def error_split(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 1e-8) -> tuple[float, float]:
    """(worst relative error on regular entries, worst absolute error on tiny ones)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    small = scale < abs_floor
    rel = diff[~small] / scale[~small]
    return float(rel.max(initial=0.0)), float(diff[small].max(initial=0.0))


def check_gradients(
    loss_fn: Callable[[], float],
    arrays: Sequence[np.ndarray],
    analytic: Sequence[np.ndarray],
    h: float = 1e-4,
) -> float:
    """Worst relative error between ``analytic`` grads and finite differences."""
    worst = 0.0
    for arr, grad in zip(arrays, analytic):
        worst = max(worst, max_relative_error(grad, numeric_grad(loss_fn, arr, h)))
    return worst
