"""Procedural flower-like images for offline, desk-scale experiments.

Each class is defined by a hue band and a petal-count range; individual
images vary flower position, size, petal shape, brightness, and background
clutter.  Classes are separable by design (a nearest-centroid classifier
on mean RGB clears 60%), but the jitter keeps them from being trivially
so, which is what makes small-vs-large training set comparisons
meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import RAW, Dataset, LabeledImage
from .rng import Rng

__all__ = ["ClassParams", "SyntheticFloraSpec", "synth_generate", "hue_distance", "ensure_disjoint"]


@dataclass(frozen=True)
class ClassParams:
    """Generative knobs for one synthetic class."""

    name: str
    hue_center: float  # [0, 1) colour wheel position of the petals
    hue_jitter: float
    petal_count_min: int
    petal_count_max: int
    petal_eccentricity: tuple[float, float]  # width/length ratio range
    background_seed: int


@dataclass(frozen=True)
class SyntheticFloraSpec:
    """A family of synthetic flower classes.

    ``hue_offset`` rotates the whole family around the colour wheel, which
    is how a disjoint pretext family is made for backbone pretraining.
    """

    n_classes: int = 5
    image_size: int = 64
    hue_offset: float = 0.02
    hue_jitter: float = 0.09
    noise_level: float = 25.0  # additive pixel noise, raw units
    clutter: int = 6  # distractor blobs per image
    name_prefix: str = "flora"

    def class_params(self) -> list[ClassParams]:
        out = []
        for i in range(self.n_classes):
            out.append(
                ClassParams(
                    name=f"{self.name_prefix}{i:02d}",
                    hue_center=(self.hue_offset + i / self.n_classes) % 1.0,
                    hue_jitter=self.hue_jitter,
                    petal_count_min=4 + i,
                    petal_count_max=5 + i,
                    petal_eccentricity=(0.3, 0.5),
                    background_seed=i,
                )
            )
        return out

    def class_names(self) -> list[str]:
        return [p.name for p in self.class_params()]

    def disjoint_variant(self, name_prefix: str = "pretext") -> "SyntheticFloraSpec":
        """Same family shape, hues rotated half a class-slot away."""
        return SyntheticFloraSpec(
            n_classes=self.n_classes,
            image_size=self.image_size,
            hue_offset=(self.hue_offset + 0.5 / self.n_classes) % 1.0,
            hue_jitter=self.hue_jitter,
            noise_level=self.noise_level,
            clutter=self.clutter,
            name_prefix=name_prefix,
        )


def hue_distance(a: float, b: float) -> float:
    """Circular distance on the [0, 1) colour wheel."""
    d = abs(a - b) % 1.0
    return min(d, 1.0 - d)


def ensure_disjoint(a: SyntheticFloraSpec, b: SyntheticFloraSpec, min_dist: float = 0.04) -> None:
    """Error out when two families share names or sit on overlapping hues."""
    names_a, names_b = set(a.class_names()), set(b.class_names())
    common = names_a & names_b
    if common:
        raise ValueError(f"class families share names: {sorted(common)}")
    for pa in a.class_params():
        for pb in b.class_params():
            if hue_distance(pa.hue_center, pb.hue_center) < min_dist:
                raise ValueError(
                    f"classes {pa.name} and {pb.name} have overlapping hue bands"
                )


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized HSV -> RGB; all arrays share a shape, output has a 3-axis."""
    h = np.mod(h, 1.0) * 6.0
    i = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    p = v * (1 - s)
    q = v * (1 - f * s)
    t = v * (1 - (1 - f) * s)
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def _smooth_noise(size: int, cells: int, rng: Rng) -> np.ndarray:
    """Low-frequency noise in [0, 1]: a coarse grid upsampled bilinearly."""
    coarse = rng.random((cells, cells))
    xs = np.linspace(0, cells - 1, size)
    x0 = np.floor(xs).astype(int)
    x1 = np.minimum(x0 + 1, cells - 1)
    fx = xs - x0
    rows = coarse[x0][:, x0] * np.outer(1 - fx, 1 - fx)
    rows += coarse[x0][:, x1] * np.outer(1 - fx, fx)
    rows += coarse[x1][:, x0] * np.outer(fx, 1 - fx)
    rows += coarse[x1][:, x1] * np.outer(fx, fx)
    return rows


def _render_image(params: ClassParams, size: int, spec: SyntheticFloraSpec, rng: Rng) -> np.ndarray:
    s = size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)

    # muted green-brown background with low-frequency texture
    bg_v = 0.25 + 0.35 * _smooth_noise(s, 4, rng)
    bg_h = 0.23 + 0.1 * rng.random()
    bg_s = 0.25 + 0.2 * rng.random()
    img = _hsv_to_rgb(np.full((s, s), bg_h), np.full((s, s), bg_s), bg_v)

    # distractor blobs in random hues
    for _ in range(spec.clutter):
        bx, by = rng.uniform(0, s, 2)
        br = rng.uniform(0.04, 0.10) * s
        mask = (xx - bx) ** 2 + (yy - by) ** 2 < br**2
        blob = _hsv_to_rgb(
            np.full((s, s), rng.random()),
            np.full((s, s), 0.3 + 0.3 * rng.random()),
            np.full((s, s), 0.3 + 0.4 * rng.random()),
        )
        img[mask] = blob[mask]

    # flower geometry
    cx = s / 2 + rng.uniform(-0.08, 0.08) * s
    cy = s / 2 + rng.uniform(-0.08, 0.08) * s
    n_petals = int(rng.integers(params.petal_count_min, params.petal_count_max + 1))
    base_angle = rng.uniform(0, 2 * np.pi)
    length = rng.uniform(0.26, 0.38) * s
    ecc = rng.uniform(*params.petal_eccentricity)
    hue = params.hue_center + rng.uniform(-params.hue_jitter, params.hue_jitter)
    sat = rng.uniform(0.65, 0.95)
    val = rng.uniform(0.6, 0.95)
    petal_rgb = _hsv_to_rgb(np.full((s, s), hue), np.full((s, s), sat), np.full((s, s), val))

    dx = xx - cx
    dy = yy - cy
    for k in range(n_petals):
        ang = base_angle + 2 * np.pi * k / n_petals
        ca, sa = np.cos(ang), np.sin(ang)
        u = dx * ca + dy * sa  # along the petal axis
        w = -dx * sa + dy * ca
        mask = ((u - 0.55 * length) / (0.55 * length)) ** 2 + (
            w / (ecc * length)
        ) ** 2 < 1.0
        img[mask] = petal_rgb[mask]

    # centre disk, warm and dark
    disk = dx**2 + dy**2 < (0.12 * s) ** 2
    core = _hsv_to_rgb(
        np.full((s, s), 0.12 + 0.03 * rng.random()),
        np.full((s, s), 0.8),
        np.full((s, s), 0.45 + 0.2 * rng.random()),
    )
    img[disk] = core[disk]

    raw = img * 255.0 + rng.normal(0.0, spec.noise_level, (s, s, 3))
    return np.clip(raw, 0.0, 255.0)


def synth_generate(spec: SyntheticFloraSpec, per_class: int, rng: Rng) -> Dataset:
    """Render ``per_class`` images per class; deterministic per seed.

    Each image draws from its own sub-stream keyed by (class, index), so
    datasets of different sizes share their common prefix of images.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    all_params = spec.class_params()
    images: list[LabeledImage] = []
    for label, cp in enumerate(all_params):
        for i in range(per_class):
            sub = rng.derive(f"synth:{cp.name}:{i}")
            px = _render_image(cp, spec.image_size, spec, sub)
            images.append(
                LabeledImage(
                    pixels=px,
                    label=label,
                    class_name=cp.name,
                    value_range=RAW,
                    source_path=None,
                )
            )
    return Dataset(images=images, class_names=[p.name for p in all_params])
