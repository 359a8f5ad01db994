"""Image-quality metrics over (..., C, H, W) frame stacks."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import numerics as nx
from .losses import FeatureExtractor, perceptual_loss

PSNR_CAP = 100.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5


def _check(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.ndim < 3:
        raise ValueError("expected frames shaped (..., C, H, W)")
    return pred, target


def psnr(pred, target, data_range=1.0) -> float:
    """Per-frame PSNR averaged over frames; exact matches score ``PSNR_CAP``."""
    pred, target = _check(pred, target)
    err = (pred - target).reshape(-1, int(np.prod(pred.shape[-3:])))
    mse = (err * err).mean(axis=1)
    with np.errstate(divide="ignore"):
        vals = np.where(mse == 0, PSNR_CAP, 10.0 * np.log10(data_range ** 2 / np.where(mse == 0, 1.0, mse)))
    return float(np.minimum(vals, PSNR_CAP).mean())


def gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2 * sigma * sigma))
    return g / g.sum()


def _filter(img, g):
    # separable valid-mode filtering over the last two axes
    rows = sliding_window_view(img, g.size, axis=-1) @ g
    return sliding_window_view(rows, g.size, axis=-2) @ g


def ssim(pred, target, data_range=1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), valid positions only."""
    pred, target = _check(pred, target)
    if pred.shape[-1] < SSIM_WIN or pred.shape[-2] < SSIM_WIN:
        raise ValueError(f"frames smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = gaussian_window()
    mu_x, mu_y = _filter(pred, g), _filter(target, g)
    sxx = _filter(pred * pred, g) - mu_x * mu_x
    syy = _filter(target * target, g) - mu_y * mu_y
    sxy = _filter(pred * target, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float((num / den).mean())


def perceptual_distance(pred, target, phi: FeatureExtractor | None = None) -> float:
    """Feature-space distance under a frozen extractor; reported under its own name."""
    pred = np.asarray(pred, dtype=np.float32)
    target = np.asarray(target, dtype=np.float32)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.ndim == 4:
        pred, target = pred[None], target[None]
    phi = phi or FeatureExtractor(in_channels=pred.shape[2])
    with nx.no_tape():
        return float(perceptual_loss(nx.Tensor(pred), nx.Tensor(target), phi).data)
