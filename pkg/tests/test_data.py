import json
import math

import numpy as np
import pytest

import scalecomp as sc
from scalecomp.data import dataset_to_annotation_dict
from scalecomp.errors import ConfigError, SchemaError


def _pixels_equal(a, b):
    return all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a.samples, b.samples))


def test_generation_is_deterministic():
    cfg = sc.SynthConfig(num_images=8, image_size=64)
    first = sc.generate_synthetic(cfg, seed=7)
    second = sc.generate_synthetic(cfg, seed=7)
    assert _pixels_equal(first, second)
    assert dataset_to_annotation_dict(first) == dataset_to_annotation_dict(second)


def test_different_seeds_differ():
    cfg = sc.SynthConfig(num_images=4, image_size=64)
    a = sc.generate_synthetic(cfg, seed=1)
    b = sc.generate_synthetic(cfg, seed=2)
    assert not _pixels_equal(a, b)


def test_zero_objects_per_image():
    cfg = sc.SynthConfig(num_images=3, image_size=64, objects_per_image=(0, 0))
    ds = sc.generate_synthetic(cfg, seed=0)
    assert all(s.annotations == [] for s in ds.samples)


def test_invalid_ranges_rejected():
    with pytest.raises(ConfigError):
        sc.generate_synthetic(sc.SynthConfig(objects_per_image=(5, 2)), seed=0)
    with pytest.raises(ConfigError):
        sc.generate_synthetic(sc.SynthConfig(object_size=(30.0, 10.0)), seed=0)


def test_boxes_inside_image():
    cfg = sc.SynthConfig(num_images=6, image_size=64, objects_per_image=(3, 6))
    ds = sc.generate_synthetic(cfg, seed=3)
    for s in ds.samples:
        for ann in s.annotations:
            x1, y1, x2, y2 = ann.box.corners()
            assert 0 <= x1 < x2 <= s.width
            assert 0 <= y1 < y2 <= s.height


def test_forced_extremes_pin_ratio():
    cfg = sc.SynthConfig(num_images=10, image_size=64, objects_per_image=(2, 2),
                         object_size=(8.0, 40.0), force_size_extremes=True)
    ds = sc.generate_synthetic(cfg, seed=4)
    stats = sc.scale_variation_stats(ds)
    # One 8 px and one 40 px square per image: sqrt-area ratio is exactly 5.
    assert stats.per_image_ratio == [5.0] * 10
    assert stats.fraction_gt_2x == 1.0


def test_texture_is_scale_invariant():
    # The same category at 2x scale renders the same pattern when the patch is
    # sampled at corresponding normalized coordinates.
    from scalecomp.data import _category_texture

    u = np.linspace(0.05, 0.95, 13)
    v = np.linspace(0.05, 0.95, 13)
    uu, vv = np.meshgrid(u, v)
    for cat in range(10):
        small = _category_texture(cat, uu, vv)
        large = _category_texture(cat, uu, vv)  # normalized coords: identical
        assert np.array_equal(small, large)


class TestScaleStats:
    def test_direct_count(self):
        def image_with(sizes, image_id):
            anns = [sc.Annotation(sc.Box(32, 32, s, s), 0) for s in sizes]
            return sc.ImageSample(image_id, 64, 64,
                                  np.zeros((3, 64, 64), np.float32), anns)

        ds = sc.Dataset(
            samples=[image_with([10, 30], 0), image_with([10, 15], 1)],
            categories={0: "a"},
        )
        stats = sc.scale_variation_stats(ds)
        assert stats.per_image_ratio == [3.0, 1.5]
        assert stats.fraction_gt_2x == 0.5

    def test_single_object_images_excluded(self):
        anns = [sc.Annotation(sc.Box(32, 32, 10, 10), 0)]
        ds = sc.Dataset(
            samples=[
                sc.ImageSample(0, 64, 64, np.zeros((3, 64, 64), np.float32), anns)
            ],
            categories={0: "a"},
        )
        stats = sc.scale_variation_stats(ds)
        assert stats.fraction_gt_2x == 0.0
        assert stats.per_image_ratio == []

    def test_permutation_invariant(self, rng):
        cfg = sc.SynthConfig(num_images=6, image_size=64, objects_per_image=(2, 5))
        ds = sc.generate_synthetic(cfg, seed=9)
        base = sc.scale_variation_stats(ds)
        shuffled_samples = [
            sc.ImageSample(s.id, s.width, s.height, s.pixels,
                           [s.annotations[i] for i in rng.permutation(len(s.annotations))])
            for s in ds.samples
        ]
        order = rng.permutation(len(shuffled_samples))
        ds2 = sc.Dataset(samples=[shuffled_samples[i] for i in order],
                         categories=ds.categories)
        perm = sc.scale_variation_stats(ds2)
        assert perm.fraction_gt_2x == base.fraction_gt_2x
        assert sorted(perm.per_image_ratio) == pytest.approx(sorted(base.per_image_ratio))

    def test_per_category_variant(self):
        anns = [
            sc.Annotation(sc.Box(10, 10, 4, 4), 0),
            sc.Annotation(sc.Box(30, 30, 20, 20), 1),  # different category
        ]
        ds = sc.Dataset(
            samples=[sc.ImageSample(0, 64, 64, np.zeros((3, 64, 64), np.float32), anns)],
            categories={0: "a", 1: "b"},
        )
        assert sc.scale_variation_stats(ds).per_image_ratio == [5.0]
        # No category has two instances: excluded under the per-category rule.
        assert sc.scale_variation_stats(ds, per_category=True).per_image_ratio == []


class TestAnnotationIO:
    def test_round_trip(self, tmp_path, tiny_dataset):
        path = sc.save_dataset(tiny_dataset, tmp_path)
        loaded = sc.load_annotations(path)
        assert loaded.num_categories == tiny_dataset.num_categories
        assert [s.id for s in loaded.samples] == [s.id for s in tiny_dataset.samples]
        for a, b in zip(loaded.samples, tiny_dataset.samples):
            assert len(a.annotations) == len(b.annotations)
            for x, y in zip(a.annotations, b.annotations):
                assert x.category_id == y.category_id
                assert x.box.x_center == pytest.approx(y.box.x_center, abs=1e-3)
                assert x.box.width == pytest.approx(y.box.width, abs=1e-3)

    def test_reserialization_idempotent(self, tmp_path, tiny_dataset):
        first_dir = tmp_path / "a"
        second_dir = tmp_path / "b"
        first = sc.save_dataset(tiny_dataset, first_dir)
        loaded = sc.load_annotations(first)
        second = sc.save_dataset(loaded, second_dir)
        assert json.loads(first.read_text()) == json.loads(second.read_text())

    def test_corner_to_center(self, tmp_path):
        self._write_minimal(tmp_path, bbox=[10, 10, 20, 20])
        ds = sc.load_annotations(tmp_path / "annotations.json")
        box = ds.samples[0].annotations[0].box
        assert (box.x_center, box.y_center, box.width, box.height) == (20, 20, 20, 20)
        assert ds.num_categories == 1

    def test_zero_width_rejected_naming_annotation(self, tmp_path):
        self._write_minimal(tmp_path, bbox=[10, 10, 0, 20])
        with pytest.raises(SchemaError, match="annotation id=77"):
            sc.load_annotations(tmp_path / "annotations.json")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            sc.load_annotations(tmp_path / "nope.json")

    def test_schema_violation(self, tmp_path):
        (tmp_path / "annotations.json").write_text(json.dumps({"images": []}))
        with pytest.raises(SchemaError):
            sc.load_annotations(tmp_path / "annotations.json")

    @staticmethod
    def _write_minimal(tmp_path, bbox):
        from PIL import Image

        (tmp_path / "images").mkdir(parents=True, exist_ok=True)
        Image.new("RGB", (64, 64)).save(tmp_path / "images" / "img.png")
        payload = {
            "images": [{"id": 0, "width": 64, "height": 64,
                        "file_name": "images/img.png"}],
            "annotations": [{"id": 77, "image_id": 0, "category_id": 1,
                             "bbox": bbox}],
            "categories": [{"id": 1, "name": "thing"}],
        }
        (tmp_path / "annotations.json").write_text(json.dumps(payload))
