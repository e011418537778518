"""Dataset ingestion, deterministic splits, and the image augmentation chain.

Images are HxWx3 float64 arrays, either in raw [0, 255] range or rescaled
[0, 1].  Augmentation applies, in this fixed order: rotation, width shift,
height shift, shear, zoom, horizontal flip, then a resample onto the
target grid (bilinear, nearest-edge fill) and a 1/255 rescale.  Random
draws happen in that same fixed order, so a seeded run is bit-reproducible.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .rng import Rng

__all__ = [
    "LabeledImage",
    "Dataset",
    "AugmentationConfig",
    "AugmentParams",
    "SplitSpec",
    "load_image_dir",
    "split",
    "draw_augment_params",
    "apply_augment",
    "augment",
    "augment_expand",
    "resize",
    "resize_array",
    "channel_histogram",
    "write_manifest",
]

RAW = "raw"  # pixel values in [0, 255]
UNIT = "unit"  # pixel values in [0, 1]


@dataclass
class LabeledImage:
    """One RGB image with its class label."""

    pixels: np.ndarray  # HxWx3 float64
    label: int
    class_name: str
    value_range: str = RAW
    source_path: Optional[str] = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got {self.pixels.shape}")
        if self.value_range not in (RAW, UNIT):
            raise ValueError(f"unknown value range {self.value_range!r}")
        hi = 255.0 if self.value_range == RAW else 1.0
        lo, top = float(self.pixels.min()), float(self.pixels.max())
        if lo < -1e-9 or top > hi + 1e-9:
            raise ValueError(
                f"pixels [{lo}, {top}] outside declared range [0, {hi}]"
            )

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class Dataset:
    images: list[LabeledImage]
    class_names: list[str]

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("class names must be unique")
        for img in self.images:
            if img.label < 0 or img.label >= len(self.class_names):
                raise ValueError(f"label {img.label} out of range")

    def __len__(self) -> int:
        return len(self.images)

    def by_class(self) -> list[list[int]]:
        """Image indices grouped by label, in dataset order."""
        groups: list[list[int]] = [[] for _ in self.class_names]
        for i, img in enumerate(self.images):
            groups[img.label].append(i)
        return groups

    def class_counts(self) -> list[int]:
        return [len(g) for g in self.by_class()]


@dataclass(frozen=True)
class AugmentationConfig:
    """Training-set augmentation knobs and their stock values."""

    rescale: float = 1.0 / 255.0
    rotation_range_deg: float = 40.0
    width_shift_frac: float = 0.2
    height_shift_frac: float = 0.2
    shear_range: float = 0.2
    zoom_range: float = 0.2
    horizontal_flip: bool = True
    fill_mode: str = "nearest"
    target_size: tuple[int, int] = (224, 224)
    expansion_factor: int = 10
    augment_eval: bool = False

    def __post_init__(self):
        for name in ("width_shift_frac", "height_shift_frac", "shear_range", "zoom_range"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if not 0.0 <= self.rotation_range_deg <= 180.0:
            raise ValueError("rotation range must be in [0, 180] degrees")
        if self.target_size[0] < 1 or self.target_size[1] < 1:
            raise ValueError("target size must be positive")
        if self.fill_mode != "nearest":
            raise ValueError(f"unsupported fill mode {self.fill_mode!r}")


@dataclass(frozen=True)
class SplitSpec:
    """Stratified split, either by fractions or absolute per-class counts."""

    train_frac: float = 0.70
    test_frac: float = 0.25
    val_frac: float = 0.05
    # subset mode: absolute counts per class; overrides the fractions
    counts: Optional[tuple[int, int, int]] = None  # (train, test, val)

    def __post_init__(self):
        if self.counts is None:
            total = self.train_frac + self.test_frac + self.val_frac
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"split fractions sum to {total}, expected 1")
            if min(self.train_frac, self.test_frac, self.val_frac) < 0:
                raise ValueError("split fractions must be non-negative")
        else:
            if any(c < 0 for c in self.counts):
                raise ValueError("split counts must be non-negative")


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def load_image_dir(root_path) -> Dataset:
    """Load a class-per-directory PNG/JPEG tree.

    Class indices follow sorted subdirectory names.  Images are decoded to
    raw [0, 255] doubles and are not resized here.
    """
    from PIL import Image

    root = Path(root_path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"dataset root {root} has no class directories")
    images: list[LabeledImage] = []
    class_names = [p.name for p in class_dirs]
    for label, cdir in enumerate(class_dirs):
        files = sorted(
            p for p in cdir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES
        )
        if not files:
            raise ValueError(f"class directory {cdir} contains no images")
        for f in files:
            try:
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float64)
            except Exception as exc:
                raise ValueError(f"cannot read image file {f}: {exc}") from exc
            images.append(
                LabeledImage(
                    pixels=arr,
                    label=label,
                    class_name=class_names[label],
                    value_range=RAW,
                    source_path=str(f.relative_to(root)),
                )
            )
    return Dataset(images=images, class_names=class_names)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def split(ds: Dataset, spec: SplitSpec, rng: Rng) -> tuple[Dataset, Dataset, Dataset]:
    """Per-class stratified random partition into (train, test, val).

    With fractions, counts are rounded down and the remainder goes to
    train, so the three parts are disjoint and exhaustive.  With absolute
    counts, leftover images per class are simply unused.
    """
    train_idx: list[int] = []
    test_idx: list[int] = []
    val_idx: list[int] = []
    for label, group in enumerate(ds.by_class()):
        order = rng.permutation(len(group))
        shuffled = [group[i] for i in order]
        n = len(shuffled)
        if spec.counts is not None:
            n_train, n_test, n_val = spec.counts
            if n_train + n_test + n_val > n:
                raise ValueError(
                    f"class {ds.class_names[label]!r} has {n} images, "
                    f"needs {n_train + n_test + n_val}"
                )
        else:
            n_test = int(math.floor(spec.test_frac * n))
            n_val = int(math.floor(spec.val_frac * n))
            n_train = n - n_test - n_val  # remainder assigned to train
        train_idx.extend(shuffled[:n_train])
        test_idx.extend(shuffled[n_train : n_train + n_test])
        val_idx.extend(shuffled[n_train + n_test : n_train + n_test + n_val])

    def subset(indices: list[int]) -> Dataset:
        return Dataset(
            images=[ds.images[i] for i in indices], class_names=list(ds.class_names)
        )

    return subset(train_idx), subset(test_idx), subset(val_idx)


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------


def _bilinear_sample(pixels: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample HxWx3 pixels at float coords, clamping to the nearest edge."""
    h, w = pixels.shape[:2]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    top = pixels[y0, x0] * (1 - fx) + pixels[y0, x1] * fx
    bot = pixels[y1, x0] * (1 - fx) + pixels[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _resize_coords(n_out: int, n_in: int) -> np.ndarray:
    """Corner-aligned source coordinates; identity when sizes match."""
    if n_out == 1:
        return np.full(1, (n_in - 1) / 2.0)
    return np.arange(n_out) * (n_in - 1) / (n_out - 1)


def resize_array(pixels: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of an HxWx3 array; exact identity at equal sizes."""
    if pixels.shape[0] == h and pixels.shape[1] == w:
        return pixels.copy()
    ys = _resize_coords(h, pixels.shape[0])
    xs = _resize_coords(w, pixels.shape[1])
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    return _bilinear_sample(pixels, grid_y, grid_x)


def resize(img: LabeledImage, h: int, w: int) -> LabeledImage:
    return LabeledImage(
        pixels=resize_array(img.pixels, h, w),
        label=img.label,
        class_name=img.class_name,
        value_range=img.value_range,
        source_path=img.source_path,
    )


def channel_histogram(img: LabeledImage) -> np.ndarray:
    """Per-channel 256-bin intensity counts; each row sums to H*W."""
    px = img.pixels if img.value_range == RAW else img.pixels * 255.0
    bins = np.clip(np.floor(px), 0, 255).astype(int)
    out = np.zeros((3, 256), dtype=np.int64)
    for c in range(3):
        out[c] = np.bincount(bins[:, :, c].ravel(), minlength=256)
    return out


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    """One concrete draw of the augmentation chain."""

    rotation_deg: float
    width_shift: float  # in pixels of the source image
    height_shift: float
    shear: float  # radians
    zoom: float
    flip: bool


def draw_augment_params(img: LabeledImage, cfg: AugmentationConfig, rng: Rng) -> AugmentParams:
    """Draw the chain's random parameters in their fixed order."""
    rot = rng.uniform(-cfg.rotation_range_deg, cfg.rotation_range_deg)
    wshift = rng.uniform(-cfg.width_shift_frac, cfg.width_shift_frac) * img.width
    hshift = rng.uniform(-cfg.height_shift_frac, cfg.height_shift_frac) * img.height
    shear = rng.uniform(-cfg.shear_range, cfg.shear_range)
    zoom = rng.uniform(1.0 - cfg.zoom_range, 1.0 + cfg.zoom_range)
    flip = bool(rng.random() < 0.5) if cfg.horizontal_flip else False
    return AugmentParams(
        rotation_deg=float(rot),
        width_shift=float(wshift),
        height_shift=float(hshift),
        shear=float(shear),
        zoom=float(zoom),
        flip=flip,
    )


def _affine_matrix(p: AugmentParams, cx: float, cy: float) -> np.ndarray:
    """Forward 3x3 homogeneous transform about the image centre.

    Applies rotation, then the two shifts, then shear, then zoom, then the
    horizontal flip; matches the declared chain order.
    """

    def about_center(m2: np.ndarray) -> np.ndarray:
        m = np.eye(3)
        m[:2, :2] = m2
        m[0, 2] = cx - m2[0, 0] * cx - m2[0, 1] * cy
        m[1, 2] = cy - m2[1, 0] * cx - m2[1, 1] * cy
        return m

    th = math.radians(p.rotation_deg)
    rot = about_center(np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]]))
    shift = np.eye(3)
    shift[0, 2] = p.width_shift
    shift[1, 2] = p.height_shift
    shear = about_center(np.array([[1.0, math.tan(p.shear)], [0.0, 1.0]]))
    zoom = about_center(np.array([[p.zoom, 0.0], [0.0, p.zoom]]))
    flip = about_center(np.array([[-1.0, 0.0], [0.0, 1.0]])) if p.flip else np.eye(3)
    # x-axis = width, y-axis = height; matrices act on (x, y, 1) columns
    return flip @ zoom @ shear @ shift @ rot


def apply_augment(
    img: LabeledImage, params: AugmentParams, cfg: AugmentationConfig
) -> LabeledImage:
    """Apply one drawn augmentation; output is target-sized, range [0, 1]."""
    if img.value_range != RAW:
        raise ValueError("augment expects raw-range input")
    th, tw = cfg.target_size
    # output grid -> source-size grid (corner-aligned), then inverse transform
    xs = _resize_coords(tw, img.width)
    ys = _resize_coords(th, img.height)
    gx, gy = np.meshgrid(xs, ys)  # [th, tw]
    cx, cy = (img.width - 1) / 2.0, (img.height - 1) / 2.0
    m = _affine_matrix(params, cx, cy)
    minv = np.linalg.inv(m)
    src_x = minv[0, 0] * gx + minv[0, 1] * gy + minv[0, 2]
    src_y = minv[1, 0] * gx + minv[1, 1] * gy + minv[1, 2]
    # rescale as division: "1/255" means divide by 255, bit-exactly
    out = _bilinear_sample(img.pixels, src_y, src_x) / (1.0 / cfg.rescale)
    return LabeledImage(
        pixels=out,
        label=img.label,
        class_name=img.class_name,
        value_range=UNIT,
        source_path=img.source_path,
    )


def augment(img: LabeledImage, cfg: AugmentationConfig, rng: Rng) -> LabeledImage:
    """Draw parameters and apply the chain in one go."""
    return apply_augment(img, draw_augment_params(img, cfg, rng), cfg)


def augment_expand(ds: Dataset, cfg: AugmentationConfig, rng: Rng) -> Dataset:
    """Replace every image with ``expansion_factor`` augmented variants.

    The originals are excluded from the output.  Each variant draws from
    its own sub-stream keyed by (image index, copy index), so results do
    not depend on iteration order.
    """
    if cfg.expansion_factor < 1:
        raise ValueError("expansion factor must be >= 1")
    out: list[LabeledImage] = []
    for i, img in enumerate(ds.images):
        for j in range(cfg.expansion_factor):
            sub = rng.derive(f"augment:{i}:{j}")
            out.append(augment(img, cfg, sub))
    return Dataset(images=out, class_names=list(ds.class_names))


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def write_manifest(path, splits: dict[str, Dataset]) -> None:
    """One line per image: relative path (or synthetic id), label, split tag."""
    with open(path, "w") as f:
        for tag, ds in splits.items():
            for i, img in enumerate(ds.images):
                ident = img.source_path or f"synthetic:{img.class_name}:{i}"
                f.write(f"{ident},{img.label},{tag}{os.linesep}")
