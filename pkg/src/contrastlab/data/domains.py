"""Procedural 16x16 grayscale domains.

Every image is one anti-aliased shape filled with a sinusoidal grating on a
dark background. Four factors vary per sample: shape, grating frequency,
brightness and placement. Each domain makes one factor the label and leaves
the others as nuisance:

========================  ==============  =====================================
rule                      label factor    default use
========================  ==============  =====================================
``shape``                 shape id        source (shapes 0-7), near (8-11)
``texture``               frequency band  far-texture target
``brightness``            brightness band far-brightness target
========================  ==============  =====================================

Raster rules (kept exact so the datasets can be regenerated elsewhere):

* pixel ``(r, c)`` covers ``[c/S, (c+1)/S) x [r/S, (r+1)/S)`` in unit image
  coordinates, ``x`` to the right and ``y`` downward;
* each pixel is the mean of a ``SS x SS`` grid of subsamples at
  ``((c + (j + 0.5)/SS)/S, (r + (i + 0.5)/SS)/S)``, ``SS = 4``;
* shape coordinates are ``u = (x - cx)/radius``, ``v = (y - cy)/radius`` and
  membership tests are listed in :data:`SHAPES`;
* foreground intensity is ``brightness * (1 - depth + depth * t)`` with grating
  ``t = 0.5 + 0.5 * sin(2 pi f (gx cos(theta) + gy sin(theta)) + phase)``; in the
  default ``object`` texture frame ``(gx, gy) = (u/2, v/2)``, so ``f`` counts
  cycles across the shape's bounding diameter and the texture moves and scales
  with the shape (crops keep it); the ``image`` frame uses ``(gx, gy) = (x, y)``;
* by default orientation and phase are fixed (theta = 0, phase = pi/2, a
  cosine that is symmetric under horizontal flips), so frequency is the only
  free texture factor;
* the anti-aliased image gets additive N(0, pixel_noise^2) noise and is
  clipped to [0, 1].

Sampling draws, per split, from ``RngStream(seed, f"domain/{domain_id}/{split}")``
in this order for all samples at once: shape, frequency, theta, phase,
brightness, cx, cy, radius, then the pixel noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from ..errors import ConfigError
from ..numerics import RngStream

SUPERSAMPLE = 4
SPLITS = ("train", "val", "test")


def _bar(u, v, half_w, half_l):
    return (np.abs(u) <= half_l) & (np.abs(v) <= half_w)


SHAPES: dict[int, tuple[str, Callable]] = {
    0: ("disk", lambda u, v: u * u + v * v <= 1.0),
    1: ("ring", lambda u, v: (u * u + v * v <= 1.0) & (u * u + v * v >= 0.55**2)),
    2: ("square", lambda u, v: np.maximum(np.abs(u), np.abs(v)) <= 0.8),
    3: ("frame", lambda u, v: (np.maximum(np.abs(u), np.abs(v)) <= 0.9) & (np.maximum(np.abs(u), np.abs(v)) >= 0.5)),
    4: ("hbar", lambda u, v: _bar(u, v, 0.3, 1.0)),
    5: ("vbar", lambda u, v: _bar(v, u, 0.3, 1.0)),
    6: ("cross", lambda u, v: _bar(u, v, 0.25, 1.0) | _bar(v, u, 0.25, 1.0)),
    7: ("triangle_up", lambda u, v: (np.abs(v) <= 0.8) & (np.abs(u) <= (v + 0.8) / 1.6)),
    8: ("x_cross", lambda u, v: _bar((u + v) / np.sqrt(2), (u - v) / np.sqrt(2), 0.25, 1.0)
        | _bar((u - v) / np.sqrt(2), (u + v) / np.sqrt(2), 0.25, 1.0)),
    9: ("diamond", lambda u, v: np.abs(u) + np.abs(v) <= 1.0),
    10: ("triangle_down", lambda u, v: (np.abs(v) <= 0.8) & (np.abs(u) <= (0.8 - v) / 1.6)),
    11: ("tee", lambda u, v: ((v >= -0.9) & (v <= -0.4) & (np.abs(u) <= 0.9)) | ((np.abs(u) <= 0.25) & (v >= -0.9) & (v <= 0.9))),
}


@dataclass(frozen=True)
class DomainSpec:
    """Parametric generator description for one synthetic domain.

    ``counts`` gives the total number of samples per split; classes are
    assigned round-robin so they are balanced within one sample. For band
    rules the labelled factor's range is cut into ``num_classes`` equal bands
    and ``band_margin`` (a fraction of the band width) is kept empty on both
    sides of every band edge.
    """

    domain_id: str
    rule: str = "shape"
    num_classes: int = 8
    shape_ids: tuple[int, ...] | None = None
    nuisance_shapes: tuple[int, ...] = tuple(range(12))
    image_size: int = 16
    frequency_range: tuple[float, float] = (1.0, 4.5)
    brightness_range: tuple[float, float] = (0.35, 1.0)
    texture_depth: float = 1.0
    position_jitter: float = 0.08
    radius_range: tuple[float, float] = (0.28, 0.36)
    orientation_range: tuple[float, float] = (0.0, 0.0)
    phase_range: tuple[float, float] = (np.pi / 2, np.pi / 2)
    texture_frame: str = "object"
    pixel_noise: float = 0.02
    band_margin: float = 0.1
    counts: dict = field(default_factory=lambda: {"train": 1024, "val": 0, "test": 256})
    seed: int = 0

    def violations(self) -> list[str]:
        out = []
        if self.rule not in ("shape", "texture", "brightness"):
            out.append(f"{self.domain_id}: unknown class rule {self.rule!r}")
        if self.num_classes < 1:
            out.append(f"{self.domain_id}: num_classes must be >= 1")
        if self.rule == "shape":
            ids = self.class_shapes()
            if len(ids) < self.num_classes:
                out.append(
                    f"{self.domain_id}: {self.num_classes} classes requested but the shape inventory "
                    f"offers only {len(ids)}"
                )
            bad = [i for i in ids if i not in SHAPES]
            if bad:
                out.append(f"{self.domain_id}: unknown shape ids {bad}")
        if self.image_size < 4:
            out.append(f"{self.domain_id}: image_size must be >= 4")
        for name in ("frequency_range", "brightness_range", "radius_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                out.append(f"{self.domain_id}: {name} must satisfy low < high")
        for name in ("orientation_range", "phase_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                out.append(f"{self.domain_id}: {name} must satisfy low <= high")
        if self.texture_frame not in ("object", "image"):
            out.append(f"{self.domain_id}: texture_frame must be 'object' or 'image'")
        if not 0 <= self.band_margin < 0.5:
            out.append(f"{self.domain_id}: band_margin must lie in [0, 0.5)")
        unknown = set(self.counts) - set(SPLITS)
        if unknown:
            out.append(f"{self.domain_id}: unknown splits {sorted(unknown)}")
        if any(int(n) < 0 for n in self.counts.values()):
            out.append(f"{self.domain_id}: split counts must be >= 0")
        return out

    def class_shapes(self) -> tuple[int, ...]:
        if self.shape_ids is not None:
            return tuple(self.shape_ids)
        return tuple(range(len(SHAPES)))[: max(self.num_classes, 0)] if self.rule == "shape" else ()

    def to_dict(self) -> dict:
        return {
            "domain_id": self.domain_id,
            "rule": self.rule,
            "num_classes": self.num_classes,
            "shape_ids": None if self.shape_ids is None else list(self.shape_ids),
            "nuisance_shapes": list(self.nuisance_shapes),
            "image_size": self.image_size,
            "frequency_range": list(self.frequency_range),
            "brightness_range": list(self.brightness_range),
            "texture_depth": self.texture_depth,
            "position_jitter": self.position_jitter,
            "radius_range": list(self.radius_range),
            "orientation_range": list(self.orientation_range),
            "phase_range": list(self.phase_range),
            "texture_frame": self.texture_frame,
            "pixel_noise": self.pixel_noise,
            "band_margin": self.band_margin,
            "counts": dict(self.counts),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d) -> "DomainSpec":
        d = dict(d)
        for k in (
            "shape_ids",
            "nuisance_shapes",
            "frequency_range",
            "brightness_range",
            "radius_range",
            "orientation_range",
            "phase_range",
        ):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def source_domain(seed: int = 0, **overrides) -> DomainSpec:
    return replace(DomainSpec("source", "shape", 8, shape_ids=tuple(range(8)), seed=seed), **overrides)


def near_domain(seed: int = 0, **overrides) -> DomainSpec:
    spec = DomainSpec(
        "near", "shape", 4, shape_ids=(8, 9, 10, 11), counts={"train": 160, "val": 0, "test": 200}, seed=seed
    )
    return replace(spec, **overrides)


def far_texture_domain(seed: int = 0, **overrides) -> DomainSpec:
    spec = DomainSpec("far-texture", "texture", 5, counts={"train": 500, "val": 0, "test": 500}, seed=seed)
    return replace(spec, **overrides)


def far_brightness_domain(seed: int = 0, **overrides) -> DomainSpec:
    spec = DomainSpec("far-brightness", "brightness", 5, counts={"train": 500, "val": 0, "test": 500}, seed=seed)
    return replace(spec, **overrides)


@dataclass
class Dataset:
    """Flattened images (n x S*S, row-major) with labels and split tags."""

    domain_id: str
    images: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    sample_ids: np.ndarray
    num_classes: int
    image_size: int
    factors: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.domain_id,
            self.images[idx],
            self.labels[idx],
            self.splits[idx],
            self.sample_ids[idx],
            self.num_classes,
            self.image_size,
            {k: v[idx] for k, v in self.factors.items()},
        )

    def split(self, name: str) -> "Dataset":
        return self.subset(np.flatnonzero(self.splits == name))

    def with_images(self, images: np.ndarray) -> "Dataset":
        out = self.subset(np.arange(len(self)))
        out.images = np.asarray(images, dtype=np.float64)
        return out


def band_edges(lo: float, hi: float, k: int, margin: float) -> np.ndarray:
    """(k, 2) array of [low, high] sampling intervals for band classes."""
    width = (hi - lo) / k
    starts = lo + width * np.arange(k)
    return np.stack([starts + margin * width, starts + (1 - margin) * width], axis=1)


def band_of(value, lo: float, hi: float, k: int) -> np.ndarray:
    """Recover a band label from the generating factor."""
    return np.clip(((np.asarray(value) - lo) / ((hi - lo) / k)).astype(np.int64), 0, k - 1)


def rasterize(spec: DomainSpec, shape_id, frequency, theta, phase, brightness, cx, cy, radius) -> np.ndarray:
    """Noise-free anti-aliased images, one row per parameter tuple."""
    s, ss = spec.image_size, SUPERSAMPLE
    grid = (np.arange(s * ss) + 0.5) / (s * ss)
    ys, xs = np.meshgrid(grid, grid, indexing="ij")
    n = len(shape_id)
    out = np.empty((n, s * s))
    for i in range(n):
        u = (xs - cx[i]) / radius[i]
        v = (ys - cy[i]) / radius[i]
        mask = SHAPES[int(shape_id[i])][1](u, v).astype(np.float64)
        if spec.texture_frame == "object":
            gx, gy = u / 2.0, v / 2.0
        else:
            gx, gy = xs, ys
        t = 0.5 + 0.5 * np.sin(2 * np.pi * frequency[i] * (gx * np.cos(theta[i]) + gy * np.sin(theta[i])) + phase[i])
        fg = brightness[i] * (1.0 - spec.texture_depth + spec.texture_depth * t)
        img = (mask * fg).reshape(s, ss, s, ss).mean(axis=(1, 3))
        out[i] = img.reshape(-1)
    return out


def _sample_split(spec: DomainSpec, split: str, n: int, offset: int):
    rng = RngStream(spec.seed, f"domain/{spec.domain_id}/{split}")
    k = spec.num_classes
    labels = np.arange(n, dtype=np.int64) % k
    class_shapes = spec.class_shapes()
    nuisance = np.asarray(spec.nuisance_shapes)

    nuisance_shape = nuisance[rng.integers(0, len(nuisance), size=n)]
    if spec.rule == "shape":
        shape_id = np.asarray(class_shapes, dtype=np.int64)[labels]
    else:
        shape_id = nuisance_shape

    f_lo, f_hi = spec.frequency_range
    if spec.rule == "texture":
        edges = band_edges(f_lo, f_hi, k, spec.band_margin)[labels]
        frequency = edges[:, 0] + rng.uniform(size=n) * (edges[:, 1] - edges[:, 0])
    else:
        frequency = rng.uniform(f_lo, f_hi, size=n)
    theta = rng.uniform(*spec.orientation_range, size=n)
    phase = rng.uniform(*spec.phase_range, size=n)
    b_lo, b_hi = spec.brightness_range
    if spec.rule == "brightness":
        edges = band_edges(b_lo, b_hi, k, spec.band_margin)[labels]
        brightness = edges[:, 0] + rng.uniform(size=n) * (edges[:, 1] - edges[:, 0])
    else:
        brightness = rng.uniform(b_lo, b_hi, size=n)
    j = spec.position_jitter
    cx = 0.5 + rng.uniform(-j, j, size=n)
    cy = 0.5 + rng.uniform(-j, j, size=n)
    radius = rng.uniform(*spec.radius_range, size=n)

    clean = rasterize(spec, shape_id, frequency, theta, phase, brightness, cx, cy, radius)
    images = np.clip(clean + rng.normal(0.0, spec.pixel_noise, size=clean.shape), 0.0, 1.0)
    factors = {
        "shape_id": shape_id.astype(np.float64),
        "frequency": frequency,
        "theta": theta,
        "phase": phase,
        "brightness": brightness,
        "cx": cx,
        "cy": cy,
        "radius": radius,
    }
    ids = offset + np.arange(n, dtype=np.int64)
    return images, labels, ids, factors


def generate_domain(spec: DomainSpec) -> Dataset:
    """Generate every split of ``spec``; deterministic in the spec (seed included)."""
    v = spec.violations()
    if v:
        raise ConfigError(v)
    parts = []
    offset = 0
    for split in SPLITS:
        n = int(spec.counts.get(split, 0))
        if n == 0:
            continue
        images, labels, ids, factors = _sample_split(spec, split, n, offset)
        offset += n
        parts.append((split, images, labels, ids, factors))
    if not parts:
        raise ConfigError(f"{spec.domain_id}: all split counts are zero")
    keys = parts[0][4].keys()
    return Dataset(
        domain_id=spec.domain_id,
        images=np.concatenate([p[1] for p in parts]),
        labels=np.concatenate([p[2] for p in parts]),
        splits=np.concatenate([np.full(len(p[2]), p[0]) for p in parts]),
        sample_ids=np.concatenate([p[3] for p in parts]),
        num_classes=spec.num_classes,
        image_size=spec.image_size,
        factors={k: np.concatenate([p[4][k] for p in parts]) for k in keys},
    )
