"""Synthetic multi-anatomy phantom datasets with controlled statistical shift.

Each "anatomy" is a profile of ellipse-composition statistics (baseline
intensity, contrast, ellipse count, texture).  Profiles with different
intensity means produce datasets whose feature statistics differ measurably,
which is the property the per-anatomy normalization machinery exists to
absorb.  Images are 2-channel (real, imaginary); the imaginary channel is
all zeros because the data emulate magnitude-only acquisitions.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io_store

DATASET_MANIFEST = "dataset.json"


@dataclass(frozen=True)
class AnatomyProfile:
    """Generation statistics for one synthetic anatomy."""

    anatomy_id: int
    name: str
    intensity_mean: float
    contrast_scale: float
    ellipse_count_range: tuple[int, int]
    texture_frequency: float
    dataset_size: int

    def __post_init__(self):
        if self.anatomy_id < 0:
            raise ValueError("anatomy_id must be non-negative")
        if not 0.0 < self.intensity_mean < 1.0:
            raise ValueError("intensity_mean must lie in (0, 1)")
        if self.contrast_scale <= 0.0:
            raise ValueError("contrast_scale must be positive")
        lo, hi = self.ellipse_count_range
        if lo < 0 or hi < lo:
            raise ValueError("ellipse_count_range must satisfy 0 <= min <= max")
        if self.texture_frequency < 0.0:
            raise ValueError("texture_frequency must be non-negative")
        if self.dataset_size < 10:
            raise ValueError("dataset_size must be at least 10")


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint train/val/test index lists covering one dataset."""

    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]


@dataclass
class PhantomDataset:
    profile: AnatomyProfile
    images: np.ndarray  # (N, 2, H, W) float32
    seed: int

    @property
    def name(self):
        return self.profile.name


def example_profiles():
    """Three stock profiles: two large training anatomies plus a small adaptation one."""
    return {
        "ovoid": AnatomyProfile(
            anatomy_id=0,
            name="ovoid",
            intensity_mean=0.35,
            contrast_scale=0.45,
            ellipse_count_range=(4, 9),
            texture_frequency=0.0,
            dataset_size=200,
        ),
        "lobular": AnatomyProfile(
            anatomy_id=1,
            name="lobular",
            intensity_mean=0.62,
            contrast_scale=0.35,
            ellipse_count_range=(2, 5),
            texture_frequency=3.0,
            dataset_size=200,
        ),
        "striated": AnatomyProfile(
            anatomy_id=2,
            name="striated",
            intensity_mean=0.48,
            contrast_scale=0.40,
            ellipse_count_range=(3, 7),
            texture_frequency=1.5,
            dataset_size=20,
        ),
    }


def generate_image(profile, image_size, rng):
    """One random ellipse-composition phantom as a (2, H, W) float32 array."""
    n = image_size
    grid = np.linspace(-1.0, 1.0, n)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    img = np.full((n, n), profile.intensity_mean, dtype=np.float64)

    lo, hi = profile.ellipse_count_range
    count = int(rng.integers(lo, hi + 1))
    for _ in range(count):
        cy, cx = rng.uniform(-0.55, 0.55, size=2)
        sa, sb = rng.uniform(0.08, 0.40, size=2)
        theta = rng.uniform(0.0, np.pi)
        amp = float(rng.choice((-1.0, 1.0)))
        amp *= profile.contrast_scale * rng.uniform(0.10, 0.30)
        ct, st = np.cos(theta), np.sin(theta)
        xr = (xx - cx) * ct + (yy - cy) * st
        yr = -(xx - cx) * st + (yy - cy) * ct
        img += amp * (((xr / sa) ** 2 + (yr / sb) ** 2) <= 1.0)

    if profile.texture_frequency > 0.0:
        orient = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        carrier = xx * np.cos(orient) + yy * np.sin(orient)
        img += 0.06 * profile.contrast_scale * np.sin(
            2.0 * np.pi * profile.texture_frequency * carrier + phase
        )

    np.clip(img, 0.0, 1.0, out=img)
    out = np.zeros((2, n, n), dtype=np.float32)
    out[0] = img.astype(np.float32)
    return out


def generate_dataset(profile, image_size, seed):
    """Deterministic dataset of ``profile.dataset_size`` phantoms, shape (N, 2, H, W).

    Each sample's RNG stream is derived from (seed, anatomy_id, index), so
    samples can be generated in any order (or in parallel) with identical
    results.  The real channel lies in [0, 1]; the dataset pixel mean tracks
    ``profile.intensity_mean`` for contrast scales up to about 0.5.
    """
    if image_size < 32 or image_size % 2:
        raise ValueError("image_size must be even and at least 32")
    images = np.empty((profile.dataset_size, 2, image_size, image_size), dtype=np.float32)
    for i in range(profile.dataset_size):
        rng = np.random.default_rng([int(seed), profile.anatomy_id, i])
        images[i] = generate_image(profile, image_size, rng)
    return images


def split_dataset(n, seed):
    """80/10/10 split (nearest-sample rounding), deterministic given seed."""
    if n < 10:
        raise ValueError("need at least 10 samples to split")
    n_train = int(n * 0.8 + 0.5)
    n_val = int(n * 0.1 + 0.5)
    perm = np.random.default_rng(int(seed)).permutation(n)
    return DatasetSplit(
        train=tuple(sorted(int(i) for i in perm[:n_train])),
        val=tuple(sorted(int(i) for i in perm[n_train : n_train + n_val])),
        test=tuple(sorted(int(i) for i in perm[n_train + n_val :])),
    )


def resize_or_crop(image, target):
    """Center-crop when the source covers the target, bilinear resize otherwise."""
    import torch
    import torch.nn.functional as F

    if target <= 0:
        raise ValueError("target size must be positive")
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 2:
        raise ValueError(f"expected (2, H, W) image, got shape {image.shape}")
    _, h, w = image.shape
    if h >= target and w >= target:
        top = (h - target) // 2
        left = (w - target) // 2
        return np.ascontiguousarray(image[:, top : top + target, left : left + target])
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
    out = F.interpolate(t, size=(target, target), mode="bilinear", align_corners=False)
    return out[0].numpy()


def save_dataset(dataset, directory):
    """Persist one image per tensor file plus a manifest; byte-stable given inputs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, image in enumerate(dataset.images):
        name = f"img_{i:05d}{io_store.TENSOR_SUFFIX}"
        io_store.write_tensor(directory / name, image)
        files.append(name)
    manifest = {
        "kind": "dataset",
        "profile": dataclasses.asdict(dataset.profile),
        "seed": dataset.seed,
        "image_size": int(dataset.images.shape[-1]),
        "files": files,
    }
    (directory / DATASET_MANIFEST).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return directory


def load_dataset(directory):
    directory = Path(directory)
    path = directory / DATASET_MANIFEST
    if not path.is_file():
        raise io_store.FormatError(f"{directory}: missing {DATASET_MANIFEST}")
    manifest = json.loads(path.read_text())
    prof = manifest["profile"]
    prof["ellipse_count_range"] = tuple(prof["ellipse_count_range"])
    profile = AnatomyProfile(**prof)
    images = np.stack([io_store.read_tensor(directory / f) for f in manifest["files"]])
    return PhantomDataset(profile=profile, images=images, seed=int(manifest["seed"]))
