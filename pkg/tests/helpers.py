"""Shared test oracles: finite differences and brute-force metric loops."""

from __future__ import annotations

import numpy as np


def fd_grad(loss_fn, arr: np.ndarray, entries: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of ``loss_fn()`` wrt arr[entries].

    ``loss_fn`` must recompute the loss from scratch using ``arr`` in place;
    ``entries`` are flat indices into ``arr``.
    """
    flat = arr.reshape(-1)
    grads = np.zeros(len(entries))
    for n, i in enumerate(entries):
        orig = flat[i]
        flat[i] = orig + step
        plus = loss_fn()
        flat[i] = orig - step
        minus = loss_fn()
        flat[i] = orig
        grads[n] = (plus - minus) / (2.0 * step)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return np.abs(analytic - numeric) / scale


def pick_entries(rng: np.random.Generator, arr: np.ndarray, count: int) -> np.ndarray:
    return rng.choice(arr.size, size=min(count, arr.size), replace=False)
