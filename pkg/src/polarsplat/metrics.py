"""Image quality metrics on [0, 1] polar images, with the SSIM adjoint."""
from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-x * x / (2 * sigma * sigma))
    return k / k.sum()


def _blur(img, k):
    # separable, zero padded; symmetric kernel => this operator is self-adjoint
    out = correlate1d(img, k, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, k, axis=1, mode="constant", cval=0.0)


def ssim_map(x, y, return_parts=False):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("image shapes differ")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    k = gaussian_kernel()
    mx, my = _blur(x, k), _blur(y, k)
    exx, eyy, exy = _blur(x * x, k), _blur(y * y, k), _blur(x * y, k)
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    a1 = 2 * mx * my + C1
    a2 = 2 * cxy + C2
    b1 = mx * mx + my * my + C1
    b2 = vx + vy + C2
    s = a1 * a2 / (b1 * b2)
    if return_parts:
        return s, (k, mx, my, a1, a2, b1, b2)
    return s


def _mask_weights(shape, mask):
    if mask is None:
        mask = np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError("mask shape differs from image shape")
    n = mask.sum()
    if n == 0:
        raise ValueError("mask selects no pixels")
    return mask / n


def ssim(x, y, mask=None) -> float:
    return float(np.sum(ssim_map(x, y) * _mask_weights(np.shape(x), mask)))


def ssim_grad(x, y, mask=None):
    """``(ssim, d ssim / d x)`` for the masked-mean SSIM; ``y`` is held fixed."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    s, (k, mx, my, a1, a2, b1, b2) = ssim_map(x, y, return_parts=True)
    w = _mask_weights(x.shape, mask)
    den = b1 * b2
    # partials of the SSIM map w.r.t. E[x], E[x^2], E[xy]
    d_mx = (2 * my * a2 - 2 * my * a1) / den - s * (2 * mx / b1 - 2 * mx / b2)
    d_exx = -s / b2
    d_exy = 2 * a1 / den
    g = (_blur(w * d_mx, k) + 2 * x * _blur(w * d_exx, k) + y * _blur(w * d_exy, k))
    return float(np.sum(s * w)), g


def psnr(x, y, data_range: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(x, dtype=float) - np.asarray(y, dtype=float)) ** 2))
    if mse == 0:
        return math.inf
    return 10 * math.log10(data_range ** 2 / mse)
