"""Weak and strong augmentation pipelines for flattened grayscale images.

Ops run in a fixed order: crop-and-resize, horizontal flip, brightness,
contrast, additive noise, 3x3 blur, clip to [0, 1]. Every random number for
every op is drawn whether or not the op is active, so a strong policy with
its extra ops at zero strength reproduces the weak policy exactly.

Crop-and-resize samples the crop box bilinearly at pixel centres: output
pixel ``i`` reads source row ``top + (i + 0.5) * h / S - 0.5`` (columns
likewise), clamped to the image. The full box therefore maps to the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..numerics import RngStream

BLUR_KERNEL = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16.0


@dataclass(frozen=True)
class AugmentationPolicy:
    kind: str = "weak"
    crop_area: tuple[float, float] = (0.7, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    brightness: float = 0.0
    contrast: float = 0.0
    noise_prob: float = 0.0
    noise_sigma: float = 0.0
    blur_prob: float = 0.0

    @classmethod
    def weak(cls) -> "AugmentationPolicy":
        return cls(kind="weak")

    @classmethod
    def strong(cls) -> "AugmentationPolicy":
        return cls(
            kind="strong",
            brightness=0.4,
            contrast=0.4,
            noise_prob=0.3,
            noise_sigma=0.05,
            blur_prob=0.5,
        )

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(kind="identity", crop_area=(1.0, 1.0), crop_ratio=(1.0, 1.0), flip_prob=0.0)

    @classmethod
    def named(cls, name: str) -> "AugmentationPolicy":
        try:
            return {"weak": cls.weak, "strong": cls.strong, "identity": cls.identity}[name]()
        except KeyError:
            raise ValueError(f"unknown augmentation policy {name!r}") from None

    def without_extras(self) -> "AugmentationPolicy":
        """Same policy with the strong-only ops at zero strength."""
        return replace(self, brightness=0.0, contrast=0.0, noise_prob=0.0, noise_sigma=0.0, blur_prob=0.0)


def bilinear_crop_resize(images: np.ndarray, top, left, h, w, out_size: int) -> np.ndarray:
    """Batch crop-and-resize. ``images`` is (n, S, S); box arrays have length n."""
    n, s, _ = images.shape
    grid = np.arange(out_size) + 0.5
    ys = np.clip(top[:, None] + grid[None, :] * (h[:, None] / out_size) - 0.5, 0.0, s - 1)
    xs = np.clip(left[:, None] + grid[None, :] * (w[:, None] / out_size) - 0.5, 0.0, s - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, s - 1)
    x1 = np.minimum(x0 + 1, s - 1)
    wy = (ys - y0)[:, :, None]
    wx = (xs - x0)[:, None, :]
    b = np.arange(n)[:, None, None]
    top_row = images[b, y0[:, :, None], x0[:, None, :]] * (1 - wx) + images[b, y0[:, :, None], x1[:, None, :]] * wx
    bot_row = images[b, y1[:, :, None], x0[:, None, :]] * (1 - wx) + images[b, y1[:, :, None], x1[:, None, :]] * wx
    return top_row * (1 - wy) + bot_row * wy


def blur3x3(images: np.ndarray) -> np.ndarray:
    """Convolve (n, S, S) images with :data:`BLUR_KERNEL`, edge-replicate padding."""
    padded = np.pad(images, ((0, 0), (1, 1), (1, 1)), mode="edge")
    s = images.shape[1]
    out = np.zeros_like(images)
    for dy in range(3):
        for dx in range(3):
            out += BLUR_KERNEL[dy, dx] * padded[:, dy : dy + s, dx : dx + s]
    return out


def augment_batch(images: np.ndarray, policy: AugmentationPolicy, rng: RngStream) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    n, d = images.shape
    s = int(round(np.sqrt(d)))
    imgs = images.reshape(n, s, s)

    area = rng.uniform(policy.crop_area[0], policy.crop_area[1], size=n)
    log_ratio = rng.uniform(np.log(policy.crop_ratio[0]), np.log(policy.crop_ratio[1]), size=n)
    pos_y = rng.uniform(size=n)
    pos_x = rng.uniform(size=n)
    flip = rng.uniform(size=n) < policy.flip_prob
    bright = rng.uniform(-1.0, 1.0, size=n) * policy.brightness
    contrast = rng.uniform(-1.0, 1.0, size=n) * policy.contrast
    noise_on = rng.uniform(size=n) < policy.noise_prob
    noise = rng.normal(size=(n, s, s)) * policy.noise_sigma
    blur_on = rng.uniform(size=n) < policy.blur_prob

    ratio = np.exp(log_ratio)
    h = np.minimum(s * np.sqrt(area * ratio), s)
    w = np.minimum(s * np.sqrt(area / ratio), s)
    out = bilinear_crop_resize(imgs, pos_y * (s - h), pos_x * (s - w), h, w, s)
    out = np.where(flip[:, None, None], out[:, :, ::-1], out)
    out = out * (1.0 + bright[:, None, None])
    if policy.contrast:
        # skipped at zero strength: (x - m) + m is not exact in floating point
        mean = out.mean(axis=(1, 2), keepdims=True)
        out = (out - mean) * (1.0 + contrast[:, None, None]) + mean
    out = out + np.where(noise_on[:, None, None], noise, 0.0)
    if blur_on.any():
        out = np.where(blur_on[:, None, None], blur3x3(out), out)
    return np.clip(out, 0.0, 1.0).reshape(n, d)


def augment(image: np.ndarray, policy: AugmentationPolicy, rng: RngStream) -> np.ndarray:
    """Single-image convenience wrapper around :func:`augment_batch`."""
    image = np.asarray(image, dtype=np.float64)
    return augment_batch(image.reshape(1, -1), policy, rng).reshape(image.shape)
