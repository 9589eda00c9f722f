"""Parametric image corruptions with fixed severity tables.

Severity ``s`` in 1..5 indexes the table for the corruption type:

==================  ====================================  ==========================
type                parameter                             table (s = 1..5)
==================  ====================================  ==========================
``gaussian-noise``  noise standard deviation              0.04 0.08 0.12 0.18 0.26
``blur``            Gaussian sigma in pixels              0.5  0.75 1.0  1.25 1.5
``contrast``        factor applied around the image mean  0.75 0.6  0.45 0.3  0.15
``pixelate``        intermediate resolution (px)          12   10   8    6    4
==================  ====================================  ==========================

Pixelate resamples bilinearly (pixel-centre convention of the crop-and-resize
augmentation) down to the table resolution and back up to the image size.
A zeroed table row (sigma 0, factor 1, resolution = image size) is the
identity. Noise for ``(type, severity)`` comes from
``RngStream(seed, f"corrupt/{type}/{severity}")`` so corrupted sets replay.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..numerics import RngStream
from .augment import bilinear_crop_resize
from .domains import Dataset

SEVERITY_TABLES: dict[str, tuple[float, ...]] = {
    "gaussian-noise": (0.04, 0.08, 0.12, 0.18, 0.26),
    "blur": (0.5, 0.75, 1.0, 1.25, 1.5),
    "contrast": (0.75, 0.6, 0.45, 0.3, 0.15),
    "pixelate": (12, 10, 8, 6, 4),
}
CORRUPTION_TYPES = tuple(SEVERITY_TABLES)


@dataclass(frozen=True)
class CorruptionSpec:
    type: str
    severity: int
    table: tuple[float, ...] | None = None

    def parameter(self) -> float:
        if self.type not in SEVERITY_TABLES:
            raise ConfigError(f"unknown corruption type {self.type!r}; known: {list(CORRUPTION_TYPES)}")
        if not isinstance(self.severity, (int, np.integer)) or not 1 <= self.severity <= 5:
            raise ConfigError(f"corruption severity must be an integer in 1..5, got {self.severity!r}")
        table = self.table if self.table is not None else SEVERITY_TABLES[self.type]
        return float(table[self.severity - 1])


def identity_table(corruption_type: str, image_size: int = 16) -> tuple[float, ...]:
    value = {"gaussian-noise": 0.0, "blur": 0.0, "contrast": 1.0, "pixelate": float(image_size)}[corruption_type]
    return (value,) * 5


def _gaussian_blur(imgs: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return imgs
    radius = 3
    x = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    s = imgs.shape[1]
    padded = np.pad(imgs, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    tmp = sum(k[i] * padded[:, i : i + s, :] for i in range(len(k)))
    padded = np.pad(tmp, ((0, 0), (0, 0), (radius, radius)), mode="edge")
    return sum(k[i] * padded[:, :, i : i + s] for i in range(len(k)))


def corrupt_images(images: np.ndarray, spec: CorruptionSpec, seed: int = 0) -> np.ndarray:
    p = spec.parameter()
    images = np.asarray(images, dtype=np.float64)
    n, d = images.shape
    s = int(round(np.sqrt(d)))
    imgs = images.reshape(n, s, s)
    if spec.type == "gaussian-noise":
        rng = RngStream(seed, f"corrupt/{spec.type}/{spec.severity}")
        out = imgs + rng.normal(0.0, 1.0, size=imgs.shape) * p
    elif spec.type == "blur":
        out = _gaussian_blur(imgs, p)
    elif spec.type == "contrast":
        mean = imgs.mean(axis=(1, 2), keepdims=True)
        out = (imgs - mean) * p + mean
    else:
        r = int(p)
        if r >= s:
            out = imgs
        else:
            # bilinear down to r x r and back up; nearest-neighbour upsampling makes the
            # distortion depend on whether r divides the image size, breaking monotonicity
            zero = np.zeros(n)
            small = bilinear_crop_resize(imgs, zero, zero, np.full(n, float(s)), np.full(n, float(s)), r)
            out = bilinear_crop_resize(small, zero, zero, np.full(n, float(r)), np.full(n, float(r)), s)
    return np.clip(out, 0.0, 1.0).reshape(n, d)


def corrupt(dataset: Dataset, spec: CorruptionSpec, seed: int = 0) -> Dataset:
    """Return a copy of ``dataset`` with corrupted images and unchanged labels."""
    return dataset.with_images(corrupt_images(dataset.images, spec, seed))
