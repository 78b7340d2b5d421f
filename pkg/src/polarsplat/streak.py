"""Azimuth streak model: per-row streak mass, adaptive gain, de-streaking, ICV."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import median_filter

DESTREAK_FLOOR = 1e-6


@dataclass(frozen=True)
class GainParams:
    gamma: float = 10.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")


def streak_mass(P_a) -> np.ndarray:
    """Per-range-row streak mass, clamped to [0, 1]."""
    return np.clip(np.asarray(P_a, dtype=float).sum(axis=1), 0.0, 1.0)


def _ramp(P, gamma):
    # (e^{gamma P} - 1) / (e^gamma - 1), stable for small gamma
    return np.expm1(gamma * P) / np.expm1(gamma)


def adaptive_gain(P_a, M_a, gp: GainParams | float = GainParams()) -> np.ndarray:
    gamma = gp.gamma if isinstance(gp, GainParams) else float(gp)
    P = np.asarray(P_a, dtype=float)
    M = np.asarray(M_a, dtype=float)[:, None]
    return P * M * _ramp(P, gamma) + (1.0 - M)


def adaptive_gain_backward(P_a, M_a, gamma: float, grad_A):
    """Vector-Jacobian product of :func:`adaptive_gain`.

    Returns ``(grad_P, grad_M)`` with ``grad_M`` already summed over each row.
    """
    P = np.asarray(P_a, dtype=float)
    M = np.asarray(M_a, dtype=float)[:, None]
    g = _ramp(P, gamma)
    dA_dP = M * (g + P * gamma * np.exp(gamma * P) / np.expm1(gamma))
    dA_dM = P * g - 1.0
    return grad_A * dA_dP, (grad_A * dA_dM).sum(axis=1)


def apply_gain(I_u, A) -> np.ndarray:
    I_u = np.asarray(I_u, dtype=float)
    A = np.asarray(A, dtype=float)
    if I_u.shape != A.shape:
        raise ValueError("image and gain shapes differ")
    return A * I_u


def destreak(bundle, mode: str = "rerender") -> np.ndarray:
    """Gain-free image for a rendered bundle.

    ``rerender`` returns the unsaturated render, i.e. the image with every
    streak probability forced to zero. ``divide`` inverts the gain
    numerically and is kept for diagnostics: pixels with ``A`` below the
    floor are passed through unchanged.
    """
    if mode == "rerender":
        return bundle.I_u.copy()
    if mode == "divide":
        A = bundle.A
        out = bundle.Ihat.copy()
        ok = A > DESTREAK_FLOOR
        out[ok] = bundle.Ihat[ok] / A[ok]
        return out
    raise ValueError(f"unknown destreak mode {mode!r}")


def icv(image, streak_rows) -> float:
    """Inverse coefficient of variation (mean / std) over the given range rows."""
    rows = sorted(set(int(r) for r in streak_rows))
    if not rows:
        raise ValueError("streak_rows must be non-empty")
    vals = np.asarray(image, dtype=float)[rows].ravel()
    sd = vals.std()
    if sd == 0:
        return float("inf")
    return float(vals.mean() / sd)


def detect_streak_rows(image, kappa: float = 2.0, window: int = 7,
                       min_sigma: float = 0.005) -> np.ndarray:
    """Boolean mask of range rows darkened as a whole relative to their neighbors.

    Each pixel is compared with a running median along range in its own
    column; a row's statistic is the median of those differences over
    azimuth. Rows whose statistic falls more than ``kappa`` robust standard
    deviations (MAD based, floored at ``min_sigma``) below zero are flagged.
    Bright returns and shadows that cover only part of a row are ignored.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError("image must be 2-D")
    ref = median_filter(img, size=(window, 1), mode="nearest")
    stat = np.median(img - ref, axis=1)
    mad = np.median(np.abs(stat - np.median(stat)))
    sigma = max(1.4826 * mad, min_sigma)
    return stat < -kappa * sigma
