"""Dataset loading, splits, the augmentation chain, resize, histograms."""

import subprocess
import sys
from collections import Counter

import numpy as np
import pytest

from florashot.data import (
    RAW,
    UNIT,
    AugmentationConfig,
    AugmentParams,
    Dataset,
    LabeledImage,
    SplitSpec,
    apply_augment,
    augment,
    augment_expand,
    channel_histogram,
    draw_augment_params,
    load_image_dir,
    resize,
    split,
    write_manifest,
)
from florashot.rng import Rng


def make_image(label=0, h=8, w=8, value=128.0, name="a"):
    return LabeledImage(
        pixels=np.full((h, w, 3), value), label=label, class_name=name, value_range=RAW
    )


def make_dataset(per_class=10, n_classes=3, h=8, w=8):
    names = [f"c{i}" for i in range(n_classes)]
    images = [
        LabeledImage(
            pixels=np.full((h, w, 3), float(lbl * 10 + i)),
            label=lbl,
            class_name=names[lbl],
            value_range=RAW,
        )
        for lbl in range(n_classes)
        for i in range(per_class)
    ]
    return Dataset(images=images, class_names=names)


class TestTypes:
    def test_rejects_out_of_range_pixels(self):
        with pytest.raises(ValueError, match="outside declared range"):
            LabeledImage(np.full((4, 4, 3), 300.0), 0, "a", RAW)

    def test_rejects_wrong_channel_count(self):
        with pytest.raises(ValueError, match="HxWx3"):
            LabeledImage(np.zeros((4, 4, 1)), 0, "a", RAW)

    def test_dataset_rejects_bad_label(self):
        img = make_image(label=5)
        with pytest.raises(ValueError, match="out of range"):
            Dataset(images=[img], class_names=["only"])

    def test_split_fractions_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum"):
            SplitSpec(train_frac=0.5, test_frac=0.2, val_frac=0.2)

    def test_augmentation_config_validation(self):
        with pytest.raises(ValueError, match="rotation"):
            AugmentationConfig(rotation_range_deg=400)


class TestLoadImageDir:
    def test_roundtrip_tree(self, tmp_path):
        from PIL import Image

        for cls in ("a", "b"):
            d = tmp_path / cls
            d.mkdir()
            for i in range(2):
                arr = np.random.default_rng(i).integers(0, 255, (6, 6, 3)).astype("uint8")
                Image.fromarray(arr, "RGB").save(d / f"{i}.png")
        ds = load_image_dir(tmp_path)
        assert len(ds) == 4
        assert ds.class_names == ["a", "b"]
        assert [img.label for img in ds.images] == [0, 0, 1, 1]
        assert ds.images[0].pixels.dtype == np.float64

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_image_dir(tmp_path / "nope")

    def test_empty_class_dir(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(ValueError, match="no images"):
            load_image_dir(tmp_path)

    def test_unreadable_file_names_the_file(self, tmp_path):
        d = tmp_path / "a"
        d.mkdir()
        (d / "bad.png").write_bytes(b"this is not a png")
        with pytest.raises(ValueError, match="bad.png"):
            load_image_dir(tmp_path)


class TestSplit:
    def test_70_25_5_per_class(self):
        ds = make_dataset(per_class=100, n_classes=3)
        tr, te, va = split(ds, SplitSpec(), Rng(0))
        assert tr.class_counts() == [70, 70, 70]
        assert te.class_counts() == [25, 25, 25]
        assert va.class_counts() == [5, 5, 5]

    def test_subset_counts_per_class(self):
        ds = make_dataset(per_class=100, n_classes=2)
        tr, te, va = split(ds, SplitSpec(counts=(25, 5, 25)), Rng(0))
        assert tr.class_counts() == [25, 25]
        assert te.class_counts() == [5, 5]
        assert va.class_counts() == [25, 25]
        assert len(tr) + len(te) + len(va) == 110  # 45 per class unused

    def test_subset_counts_too_large(self):
        ds = make_dataset(per_class=10)
        with pytest.raises(ValueError, match="needs"):
            split(ds, SplitSpec(counts=(25, 5, 25)), Rng(0))

    def test_same_seed_identical_partitions(self):
        ds = make_dataset(per_class=40)
        a = split(ds, SplitSpec(), Rng(9))
        b = split(ds, SplitSpec(), Rng(9))
        for da, db in zip(a, b):
            ids_a = [img.pixels[0, 0, 0] for img in da.images]
            ids_b = [img.pixels[0, 0, 0] for img in db.images]
            assert ids_a == ids_b

    def test_disjoint_and_exhaustive(self):
        ds = make_dataset(per_class=17, n_classes=4)
        tr, te, va = split(ds, SplitSpec(), Rng(1))

        def keys(d):
            return [img.pixels.tobytes() for img in d.images]

        combined = Counter(keys(tr)) + Counter(keys(te)) + Counter(keys(va))
        assert combined == Counter(keys(ds))


class TestAugment:
    def identity_config(self, size=8):
        return AugmentationConfig(
            rotation_range_deg=0.0,
            width_shift_frac=0.0,
            height_shift_frac=0.0,
            shear_range=0.0,
            zoom_range=0.0,
            horizontal_flip=False,
            target_size=(size, size),
        )

    def test_identity_chain_rescales_only(self):
        rng_px = np.random.default_rng(0)
        px = rng_px.integers(0, 256, (8, 8, 3)).astype(np.float64)
        img = LabeledImage(px, 0, "a", RAW)
        out = augment(img, self.identity_config(8), Rng(5))
        np.testing.assert_array_equal(out.pixels, px / 255.0)
        assert out.value_range == UNIT

    def test_pixel_255_maps_to_one(self):
        img = make_image(value=255.0)
        out = augment(img, self.identity_config(8), Rng(0))
        np.testing.assert_array_equal(out.pixels, 1.0)

    def test_double_flip_restores(self):
        px = np.random.default_rng(3).integers(0, 256, (8, 8, 3)).astype(np.float64)
        img = LabeledImage(px, 0, "a", RAW)
        cfg = self.identity_config(8)
        params = AugmentParams(0.0, 0.0, 0.0, 0.0, 1.0, flip=True)
        once = apply_augment(img, params, cfg)
        back_raw = LabeledImage(once.pixels * 255.0, 0, "a", RAW)
        twice = apply_augment(back_raw, params, cfg)
        np.testing.assert_allclose(twice.pixels, px / 255.0, atol=1e-12)

    def test_single_flip_mirrors_columns(self):
        px = np.zeros((4, 4, 3))
        px[:, 0, :] = 200.0
        img = LabeledImage(px, 0, "a", RAW)
        params = AugmentParams(0.0, 0.0, 0.0, 0.0, 1.0, flip=True)
        out = apply_augment(img, params, self.identity_config(4))
        np.testing.assert_allclose(out.pixels[:, 3, :], 200.0 / 255.0)
        np.testing.assert_allclose(out.pixels[:, 0, :], 0.0)

    def test_seeded_augment_bit_identical(self):
        px = np.random.default_rng(1).integers(0, 256, (12, 10, 3)).astype(np.float64)
        img = LabeledImage(px, 0, "a", RAW)
        cfg = AugmentationConfig(target_size=(16, 16))
        a = augment(img, cfg, Rng(77))
        b = augment(img, cfg, Rng(77))
        assert a.pixels.tobytes() == b.pixels.tobytes()

    def test_output_stays_in_unit_range(self):
        px = np.random.default_rng(2).integers(0, 256, (20, 20, 3)).astype(np.float64)
        img = LabeledImage(px, 0, "a", RAW)
        cfg = AugmentationConfig(target_size=(24, 24))
        rng = Rng(4)
        for i in range(20):
            out = augment(img, cfg, rng.derive(str(i)))
            assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0

    def test_param_draw_order_is_stable(self):
        img = make_image(h=10, w=10)
        cfg = AugmentationConfig(target_size=(10, 10))
        p1 = draw_augment_params(img, cfg, Rng(123))
        p2 = draw_augment_params(img, cfg, Rng(123))
        assert p1 == p2

    def test_cross_process_bit_identical(self):
        code = (
            "import numpy as np, hashlib\n"
            "from florashot.data import LabeledImage, AugmentationConfig, augment\n"
            "from florashot.rng import Rng\n"
            "px = np.random.default_rng(1).integers(0, 256, (12, 10, 3)).astype(np.float64)\n"
            "img = LabeledImage(px, 0, 'a', 'raw')\n"
            "out = augment(img, AugmentationConfig(target_size=(16, 16)), Rng(77))\n"
            "print(hashlib.sha256(out.pixels.tobytes()).hexdigest())\n"
        )
        runs = [
            subprocess.run(
                [sys.executable, "-c", code], capture_output=True, text=True, check=True
            ).stdout.strip()
            for _ in range(2)
        ]
        assert runs[0] == runs[1]


class TestAugmentExpand:
    def test_expansion_count_and_exclusion(self):
        ds = make_dataset(per_class=5, n_classes=1)
        cfg = AugmentationConfig(target_size=(8, 8), expansion_factor=10)
        out = augment_expand(ds, cfg, Rng(0))
        assert len(out) == 50
        assert all(img.value_range == UNIT for img in out.images)

    def test_factor_one_identity_config(self):
        ds = make_dataset(per_class=3, n_classes=2)
        cfg = AugmentationConfig(
            rotation_range_deg=0.0,
            width_shift_frac=0.0,
            height_shift_frac=0.0,
            shear_range=0.0,
            zoom_range=0.0,
            horizontal_flip=False,
            target_size=(8, 8),
            expansion_factor=1,
        )
        out = augment_expand(ds, cfg, Rng(0))
        assert len(out) == len(ds)
        for orig, aug in zip(ds.images, out.images):
            np.testing.assert_array_equal(aug.pixels, orig.pixels / 255.0)

    def test_class_histogram_preserved(self):
        ds = make_dataset(per_class=4, n_classes=3)
        cfg = AugmentationConfig(target_size=(8, 8), expansion_factor=10)
        out = augment_expand(ds, cfg, Rng(2))
        assert out.class_counts() == [40, 40, 40]


class TestResizeAndHistogram:
    def test_resize_to_own_size_identity(self):
        px = np.random.default_rng(0).integers(0, 256, (9, 7, 3)).astype(np.float64)
        img = LabeledImage(px, 0, "a", RAW)
        out = resize(img, 9, 7)
        np.testing.assert_array_equal(out.pixels, px)

    def test_resize_shape(self):
        out = resize(make_image(h=8, w=8), 16, 12)
        assert out.pixels.shape == (16, 12, 3)

    def test_histogram_uniform_gray_single_bin(self):
        hist = channel_histogram(make_image(value=128.0))
        for c in range(3):
            assert hist[c, 128] == 64
            assert hist[c].sum() == 64

    def test_histogram_sums_to_pixel_count(self):
        px = np.random.default_rng(0).integers(0, 256, (13, 11, 3)).astype(np.float64)
        hist = channel_histogram(LabeledImage(px, 0, "a", RAW))
        assert (hist.sum(axis=1) == 13 * 11).all()

    def test_histogram_unit_range_images(self):
        img = LabeledImage(np.full((4, 4, 3), 0.5), 0, "a", UNIT)
        hist = channel_histogram(img)
        assert hist[:, 127].tolist() == [16, 16, 16]


class TestManifest:
    def test_manifest_lines(self, tmp_path):
        ds = make_dataset(per_class=2, n_classes=2)
        path = tmp_path / "manifest.txt"
        write_manifest(path, {"train": ds})
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 4
        assert all(line.endswith(",train") for line in lines)
