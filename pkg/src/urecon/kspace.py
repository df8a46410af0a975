"""Centered orthonormal Fourier encoding, Cartesian line masks, data consistency.

Images are 2-channel real tensors (..., 2, H, W) with channel 0 real and
channel 1 imaginary; k-space is complex (..., H, W).  The transform pair is
centered (DC at H//2, W//2) and orthonormal, so it is unitary: round trips,
Parseval and adjointness hold to float precision.  Sampling masks are 1-D
Cartesian: whole phase-encode lines (columns) are kept or dropped, with line
positions drawn from a Gaussian density centered on DC.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import io_store


def to_complex(image):
    """(..., 2, H, W) real pair -> (..., H, W) complex."""
    image = torch.as_tensor(image)
    if image.shape[-3] != 2:
        raise ValueError(f"expected 2-channel image, got shape {tuple(image.shape)}")
    return torch.complex(image[..., 0, :, :], image[..., 1, :, :])


def to_channels(k):
    """(..., H, W) complex -> (..., 2, H, W) real pair."""
    k = torch.as_tensor(k)
    return torch.stack((k.real, k.imag), dim=-3)


def _check_even(h, w):
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims must be even, got {h}x{w}")


def fft2c(image):
    """Centered orthonormal 2-D Fourier transform of a 2-channel image."""
    x = to_complex(image)
    _check_even(x.shape[-2], x.shape[-1])
    k = torch.fft.ifftshift(x, dim=(-2, -1))
    k = torch.fft.fft2(k, norm="ortho")
    return torch.fft.fftshift(k, dim=(-2, -1))


def ifft2c(k):
    """Inverse of :func:`fft2c`; returns a 2-channel image."""
    k = torch.as_tensor(k)
    _check_even(k.shape[-2], k.shape[-1])
    x = torch.fft.ifftshift(k, dim=(-2, -1))
    x = torch.fft.ifft2(x, norm="ortho")
    return to_channels(torch.fft.fftshift(x, dim=(-2, -1)))


@dataclass(frozen=True)
class SamplingMask:
    """Binary Cartesian mask, constant along readout (height), plus its recipe."""

    mask: np.ndarray  # (H, W) bool
    accel: float
    center_fraction: float
    seed: int
    line_indices: tuple[int, ...]

    def as_tensor(self):
        return torch.from_numpy(self.mask)


def make_gaussian_mask(h, w, accel, center_fraction=0.04, seed=0, std_fraction=1.0 / 6.0):
    """Sample round(w / accel) phase-encode lines with Gaussian density around DC.

    The central ceil(center_fraction * w) lines are always kept; the rest are
    drawn without replacement with probability proportional to a Gaussian of
    standard deviation ``std_fraction * w`` centered at the DC column (w // 2).
    Deterministic given (shape, accel, center_fraction, seed).
    """
    _check_even(h, w)
    if accel <= 1.0:
        raise ValueError("acceleration must exceed 1")
    if not 0.0 <= center_fraction < 1.0 / accel:
        raise ValueError("center_fraction must lie in [0, 1/accel)")
    n_lines = int(round(w / accel))
    n_center = math.ceil(center_fraction * w)
    if n_lines < 1 or n_lines > w or n_center > n_lines:
        raise ValueError(
            f"infeasible mask: {n_lines} lines, {n_center} center lines, width {w}"
        )
    dc = w // 2
    center = list(range(dc - n_center // 2, dc - n_center // 2 + n_center))
    candidates = np.array([i for i in range(w) if i not in set(center)])
    n_random = n_lines - n_center
    if n_random:
        weights = np.exp(-0.5 * ((candidates - dc) / (std_fraction * w)) ** 2)
        rng = np.random.default_rng(int(seed))
        chosen = rng.choice(candidates, size=n_random, replace=False, p=weights / weights.sum())
        lines = sorted(center + [int(i) for i in chosen])
    else:
        lines = sorted(center)
    mask = np.zeros((h, w), dtype=bool)
    mask[:, lines] = True
    return SamplingMask(
        mask=mask,
        accel=float(accel),
        center_fraction=float(center_fraction),
        seed=int(seed),
        line_indices=tuple(lines),
    )


def _mask_tensor(mask):
    if isinstance(mask, SamplingMask):
        return mask.as_tensor()
    return torch.as_tensor(mask, dtype=torch.bool)


def undersample(image, mask):
    """Masked Fourier encoding: zero outside sampled lines, fft2c(image) on them."""
    k = fft2c(image)
    m = _mask_tensor(mask)
    return torch.where(m, k, torch.zeros((), dtype=k.dtype))


def zero_filled(k):
    """Direct inverse transform of (zero-padded) measurements; the network input."""
    return ifft2c(k)


def data_consistency(x_pred, y, mask, mode="hard"):
    """Force the prediction's k-space to agree with measurements where sampled.

    In hard mode sampled locations are replaced by ``y`` outright; with a
    positive scalar ``mode`` = lambda they become (k + lambda * y) / (1 + lambda),
    which approaches hard replacement as lambda grows.  Unsampled locations pass
    through unchanged.
    """
    y = torch.as_tensor(y)
    m = _mask_tensor(mask)
    k = fft2c(x_pred)
    if k.shape[-2:] != y.shape[-2:]:
        raise ValueError(f"shape mismatch: prediction {k.shape} vs measurements {y.shape}")
    if isinstance(mode, str):
        if mode != "hard":
            raise ValueError(f"dc mode must be 'hard' or a positive number, got {mode!r}")
        k_dc = torch.where(m, y.to(k.dtype), k)
    else:
        lam = float(mode)
        if not math.isfinite(lam) or lam <= 0.0:
            raise ValueError(f"lambda must be positive and finite, got {lam}")
        k_dc = torch.where(m, (k + lam * y.to(k.dtype)) / (1.0 + lam), k)
    return ifft2c(k_dc)


def save_mask(mask, path):
    """Persist a mask as tensor file + JSON recipe so runs are bit-reproducible."""
    path = Path(path)
    io_store.write_tensor(path, mask.mask.astype(np.float32))
    meta = dataclasses.asdict(mask)
    del meta["mask"]
    meta["line_indices"] = list(meta["line_indices"])
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n"
    )
    return path


def load_mask(path):
    path = Path(path)
    arr = io_store.read_tensor(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return SamplingMask(
        mask=arr > 0.5,
        accel=float(meta["accel"]),
        center_fraction=float(meta["center_fraction"]),
        seed=int(meta["seed"]),
        line_indices=tuple(int(i) for i in meta["line_indices"]),
    )
