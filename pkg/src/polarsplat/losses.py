"""Loss terms and their gradients w.r.t. rendered images and scene scales."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics


def _mask(shape, mask):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise ValueError("mask shape differs from image shape")
    if not mask.any():
        raise ValueError("mask selects no pixels")
    return mask


def loss_l1(pred, gt, mask=None) -> float:
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    m = _mask(pred.shape, mask)
    return float(np.abs(pred - gt)[m].mean())


def loss_l1_grad(pred, gt, mask=None):
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    m = _mask(pred.shape, mask)
    return np.sign(pred - gt) * m / m.sum()


def loss_ssim(pred, gt, mask=None) -> float:
    return 1.0 - metrics.ssim(pred, gt, mask)


def loss_ssim_grad(pred, gt, mask=None):
    _, g = metrics.ssim_grad(pred, gt, mask)
    return -g


def binarize(gt, tau_o: float):
    return (np.asarray(gt, dtype=float) > tau_o).astype(float)


def loss_opacity(Io, gt, tau_o: float, mask=None) -> float:
    if not 0 < tau_o < 1:
        raise ValueError("tau_o must lie in (0, 1)")
    return loss_l1(Io, binarize(gt, tau_o), mask)


def loss_opacity_grad(Io, gt, tau_o: float, mask=None):
    return loss_l1_grad(Io, binarize(gt, tau_o), mask)


def loss_size(scene) -> float:
    if len(scene) == 0:
        return 0.0
    return float(np.maximum(0.0, scene.scales - scene.s_init).mean())


def loss_size_grad(scene):
    """Gradient w.r.t. ``log_scales``."""
    if len(scene) == 0:
        return np.zeros((0, 3))
    s = scene.scales
    return (s > scene.s_init) * s / s.size


@dataclass
class LossParts:
    l1: float = 0.0
    ssim: float = 0.0
    opacity: float = 0.0
    size: float = 0.0


def total_loss(parts: LossParts, lambda_l1: float, lambda_o: float, lambda_size: float) -> float:
    return (lambda_l1 * parts.l1 + (1 - lambda_l1) * parts.ssim
            + lambda_o * parts.opacity + lambda_size * parts.size)
