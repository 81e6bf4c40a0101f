"""Structural similarity on [0,1] images, with an analytic input gradient.

Local statistics use a separable Gaussian window evaluated only where the
window fully fits (valid positions), so no edge renormalization is needed.
``ssim_and_grad`` returns the mean SSIM over batch/space/channels together
with its gradient with respect to the second image, which is what the
generator's structural-dissimilarity term backpropagates.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

C1 = 0.01 ** 2
C2 = 0.03 ** 2


def gaussian_window(win_size: int = 11, sigma: float = 1.5) -> np.ndarray:
    if win_size % 2 != 1 or win_size < 3:
        raise ValueError("win_size must be odd and >= 3")
    ax = np.arange(win_size, dtype=np.float64) - (win_size - 1) / 2.0
    k = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _filter_axis(x: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Valid 1-D correlation along ``axis`` of an (N,H,W,C) array."""
    v = sliding_window_view(x, kernel.shape[0], axis=axis)
    return v @ kernel


def _filter(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return _filter_axis(_filter_axis(x, kernel, 1), kernel, 2)


def _filter_adjoint(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Adjoint of ``_filter``: zero-pad then correlate (kernel is symmetric)."""
    k = kernel.shape[0] - 1
    g = np.pad(g, ((0, 0), (k, k), (k, k), (0, 0)))
    return _filter(g, kernel)


def ssim_and_grad(x: np.ndarray, y: np.ndarray, win_size: int = 11,
                  sigma: float = 1.5) -> tuple[float, np.ndarray]:
    """Mean SSIM(x, y) and d(mean SSIM)/dy. Inputs are (N,H,W,C) in [0,1]."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim != 4:
        raise ValueError("expected (N, H, W, C) batches")
    if min(x.shape[1], x.shape[2]) < win_size:
        raise ValueError(f"images smaller than the {win_size}x{win_size} window")
    kernel = gaussian_window(win_size, sigma)

    mu_x = _filter(x, kernel)
    a = _filter(y, kernel)                    # mu_y
    b = _filter(y * y, kernel)
    cxy = _filter(x * y, kernel)
    var_x = _filter(x * x, kernel) - mu_x ** 2

    n1 = 2.0 * mu_x * a + C1
    d1 = mu_x ** 2 + a ** 2 + C1
    n2 = 2.0 * (cxy - mu_x * a) + C2
    d2 = var_x + (b - a ** 2) + C2
    s = (n1 * n2) / (d1 * d2)
    mean_ssim = float(s.mean())

    w = 1.0 / s.size
    ds_dn1 = n2 / (d1 * d2)
    ds_dn2 = n1 / (d1 * d2)
    ds_dd1 = -s / d1
    ds_dd2 = -s / d2
    g_a = 2.0 * (ds_dn1 * mu_x + ds_dd1 * a - ds_dn2 * mu_x - ds_dd2 * a)
    g_b = ds_dd2
    g_c = 2.0 * ds_dn2

    grad_y = _filter_adjoint(w * g_a, kernel)
    grad_y += 2.0 * y * _filter_adjoint(w * g_b, kernel)
    grad_y += x * _filter_adjoint(w * g_c, kernel)
    return mean_ssim, grad_y


def ssim_index(x: np.ndarray, y: np.ndarray, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM only; accepts single (H,W,C) images or (N,H,W,C) batches."""
    if x.ndim == 3:
        x, y = x[None], y[None]
    value, _ = ssim_and_grad(x, y, win_size, sigma)
    return value
