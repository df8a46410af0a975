"""Image-quality metrics: PSNR, SSIM, MAE on 2-D real images."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import gaussian_filter

SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
_SSIM_TRUNCATE = 3.5  # radius int(3.5 * 1.5 + 0.5) = 5 -> 11x11 window


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def mae(pred, gt):
    pred, gt = _check_pair(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def psnr(pred, gt, data_range):
    """10 * log10(data_range^2 / MSE); +inf when the images are identical."""
    pred, gt = _check_pair(pred, gt)
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def ssim(pred, gt, data_range, sigma=SSIM_SIGMA, k1=SSIM_K1, k2=SSIM_K2):
    """Mean local structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Local means/variances/covariance are Gaussian-weighted population
    statistics; the map is cropped by the window radius before averaging so
    boundary reflections do not enter the score.
    """
    pred, gt = _check_pair(pred, gt)
    if pred.ndim != 2:
        raise ValueError(f"expected 2-D images, got shape {pred.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    radius = int(_SSIM_TRUNCATE * sigma + 0.5)
    win = 2 * radius + 1
    if min(pred.shape) < win:
        raise ValueError(f"image {pred.shape} is smaller than the {win}x{win} SSIM window")

    def filt(img):
        return gaussian_filter(img, sigma=sigma, truncate=_SSIM_TRUNCATE)

    ux = filt(pred)
    uy = filt(gt)
    uxx = filt(pred * pred)
    uyy = filt(gt * gt)
    uxy = filt(pred * gt)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    return float(np.mean(s[radius:-radius, radius:-radius]))
