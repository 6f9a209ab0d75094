"""Central finite-difference gradients for verifying backward rules."""

from __future__ import annotations

from typing import Callable

import numpy as np


def numerical_gradient(fn: Callable[[], float], array: np.ndarray, step: float = 1e-6, indices=None) -> np.ndarray:
    """d fn / d array by central differences, perturbing ``array`` in place.

    ``indices`` (flat positions) restricts the probe to a subset; the other
    entries of the result are left at zero.
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        old = flat[i]
        flat[i] = old + step
        up = fn()
        flat[i] = old - step
        down = fn()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
