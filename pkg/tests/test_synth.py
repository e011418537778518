"""Synthetic flora generator: determinism, separability, class stability."""

import colorsys

import numpy as np
import pytest

from florashot.rng import Rng
from florashot.synth import (
    SyntheticFloraSpec,
    ensure_disjoint,
    hue_distance,
    synth_generate,
)


class TestGeneration:
    def test_balanced_output(self):
        ds = synth_generate(SyntheticFloraSpec(image_size=16), 10, Rng(0))
        assert len(ds) == 50
        assert ds.class_counts() == [10] * 5

    def test_same_seed_identical_pixels(self):
        a = synth_generate(SyntheticFloraSpec(image_size=16), 4, Rng(3))
        b = synth_generate(SyntheticFloraSpec(image_size=16), 4, Rng(3))
        for ia, ib in zip(a.images, b.images):
            assert ia.pixels.tobytes() == ib.pixels.tobytes()

    def test_different_seeds_differ(self):
        a = synth_generate(SyntheticFloraSpec(image_size=16), 2, Rng(1))
        b = synth_generate(SyntheticFloraSpec(image_size=16), 2, Rng(2))
        assert a.images[0].pixels.tobytes() != b.images[0].pixels.tobytes()

    def test_prefix_stability_across_sizes(self):
        # growing a dataset keeps the smaller dataset as a prefix per class
        small = synth_generate(SyntheticFloraSpec(image_size=16), 3, Rng(9))
        large = synth_generate(SyntheticFloraSpec(image_size=16), 6, Rng(9))
        by_small = small.by_class()
        by_large = large.by_class()
        for c in range(5):
            for i in range(3):
                a = small.images[by_small[c][i]].pixels
                b = large.images[by_large[c][i]].pixels
                assert a.tobytes() == b.tobytes()

    def test_invalid_per_class(self):
        with pytest.raises(ValueError):
            synth_generate(SyntheticFloraSpec(), 0, Rng(0))

    def test_pixels_in_raw_range(self):
        ds = synth_generate(SyntheticFloraSpec(image_size=16), 5, Rng(5))
        for img in ds.images:
            assert img.pixels.min() >= 0.0 and img.pixels.max() <= 255.0


class TestSeparability:
    def test_nearest_centroid_oracle(self):
        # classes must be learnable: mean-RGB centroids clear 60%
        ds = synth_generate(SyntheticFloraSpec(image_size=24), 100, Rng(42))
        feats = np.array([img.pixels.mean(axis=(0, 1)) for img in ds.images])
        labels = np.array([img.label for img in ds.images])
        order = Rng(1).permutation(len(labels))
        fit, hold = order[:250], order[250:]
        centroids = np.array(
            [feats[fit][labels[fit] == c].mean(axis=0) for c in range(5)]
        )
        dists = ((feats[hold][:, None, :] - centroids[None]) ** 2).sum(axis=-1)
        acc = float((dists.argmin(axis=1) == labels[hold]).mean())
        assert acc > 0.60

    @staticmethod
    def _flower_hue(img):
        """Circular-mean hue of the petal pixels of one image.

        Petals are the saturated pixels in the annulus around the image
        centre; the central core disk and the border (background and
        clutter) are excluded.
        """
        px = img.pixels / 255.0
        s = px.shape[0]
        hi = px.max(axis=2)
        lo = px.min(axis=2)
        sat = np.where(hi > 0, (hi - lo) / np.maximum(hi, 1e-9), 0.0)
        yy, xx = np.mgrid[0:s, 0:s]
        r = np.sqrt((yy - s / 2) ** 2 + (xx - s / 2) ** 2)
        mask = (sat > 0.55) & (hi > 0.3) & (r > 0.18 * s) & (r < 0.55 * s)
        ys, xs = np.nonzero(mask)
        hues = np.array(
            [colorsys.rgb_to_hsv(*px[y, x])[0] for y, x in zip(ys, xs)]
        )
        # petals are the dominant hue mass; drop scattered clutter pixels
        bins = np.bincount((hues * 32).astype(int) % 32, minlength=32)
        mode = (np.argmax(bins) + 0.5) / 32
        keep = hues[np.array([hue_distance(h, mode) for h in hues]) < 0.12]
        angles = 2 * np.pi * keep
        return float(
            (np.arctan2(np.sin(angles).mean(), np.cos(angles).mean()) / (2 * np.pi)) % 1.0
        )

    def test_mean_hue_stable_across_seeds(self):
        # class-conditional petal hue varies < 5% of the wheel across seeds
        per_class_hues = {c: [] for c in range(5)}
        for seed in range(10):
            ds = synth_generate(SyntheticFloraSpec(image_size=24), 30, Rng(seed))
            for c in range(5):
                hs = [self._flower_hue(img) for img in ds.images if img.label == c]
                angles = 2 * np.pi * np.array(hs)
                mean = (
                    np.arctan2(np.sin(angles).mean(), np.cos(angles).mean()) / (2 * np.pi)
                ) % 1.0
                per_class_hues[c].append(float(mean))
        for c, hues in per_class_hues.items():
            spread = max(hue_distance(a, b) for a in hues for b in hues)
            assert spread < 0.05, f"class {c} hue spread {spread}"


class TestDisjointFamilies:
    def test_disjoint_variant_passes_check(self):
        spec = SyntheticFloraSpec()
        ensure_disjoint(spec, spec.disjoint_variant())

    def test_same_family_fails_names(self):
        spec = SyntheticFloraSpec()
        with pytest.raises(ValueError, match="share names"):
            ensure_disjoint(spec, spec)

    def test_overlapping_hues_fail(self):
        a = SyntheticFloraSpec(name_prefix="a")
        b = SyntheticFloraSpec(name_prefix="b")  # same hues, different names
        with pytest.raises(ValueError, match="hue"):
            ensure_disjoint(a, b)

    def test_hue_distance_wraps(self):
        assert hue_distance(0.95, 0.05) == pytest.approx(0.1)
