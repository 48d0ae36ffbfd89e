"""Shared test helpers: finite-difference gradient oracle and tolerances."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import pytest

FD_STEP = 1e-5


def fd_gradient(
    fn: Callable[[], float],
    arrays: Sequence[np.ndarray],
    step: float = FD_STEP,
) -> list[np.ndarray]:
    """Central finite differences of a scalar function w.r.t. each array.

    ``fn`` must recompute the scalar from the arrays' current contents; the
    arrays are perturbed in place and restored.  This path never touches the
    autodiff tape, so it is an independent oracle.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn()
            flat[i] = orig - step
            fm = fn()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Elementwise relative error with an absolute floor for near-zero entries."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
