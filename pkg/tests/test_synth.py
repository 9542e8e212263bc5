import json

import numpy as np
import pytest

from grain.boxes import to_corners
from grain.data import load_image, read_shard, read_shard_metadata
from grain.errors import ConfigError
from grain.synth import (
    COLORS,
    SHAPES,
    class_catalog,
    class_description,
    class_name,
    render_scene,
    synth_grounded_dataset,
)


class TestCatalog:
    def test_color_major_order(self):
        catalog = class_catalog(6)
        assert [c[0] for c in catalog] == ["red"] * 4 + ["green"] * 2
        assert [c[2] for c in catalog] == SHAPES + SHAPES[:2]

    def test_bounds(self):
        assert len(class_catalog(len(COLORS) * len(SHAPES))) == 32
        with pytest.raises(ConfigError):
            class_catalog(0)
        with pytest.raises(ConfigError):
            class_catalog(33)

    def test_naming(self):
        assert class_name("red", "circle") == "red circle"
        assert "red" in class_description("red", "circle")
        assert "circle" in class_description("red", "circle")


class TestRenderScene:
    def test_box_tightly_encloses_marker(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            image, (x0, y0, x1, y1) = render_scene(rng, 32, (220, 40, 40), "circle")
            marker = np.all(image == (220, 40, 40), axis=-1)
            ys, xs = np.nonzero(marker)
            # noise never reproduces the exact marker color, so the drawn
            # pixels are exactly the stencil and the box is their hull
            assert (int(xs.min()), int(ys.min())) == (x0, y0)
            assert (int(xs.max()) + 1, int(ys.max()) + 1) == (x1, y1)

    def test_deterministic_given_rng_state(self):
        a, box_a = render_scene(np.random.default_rng(3), 32, (50, 80, 230), "ring")
        b, box_b = render_scene(np.random.default_rng(3), 32, (50, 80, 230), "ring")
        assert np.array_equal(a, b) and box_a == box_b

    def test_uint8_range(self):
        image, _ = render_scene(np.random.default_rng(0), 32, (245, 245, 245), "square")
        assert image.dtype == np.uint8
        assert image.shape == (32, 32, 3)

    @pytest.mark.parametrize("shape", SHAPES)
    def test_all_shapes_render(self, shape):
        image, (x0, y0, x1, y1) = render_scene(np.random.default_rng(1), 32, (40, 190, 60), shape)
        assert x1 > x0 and y1 > y0


class TestDataset:
    def test_files_written(self, synth_dir):
        assert (synth_dir / "annotations.jsonl").exists()
        assert (synth_dir / "annotations.jsonl.meta.json").exists()
        assert (synth_dir / "labels.json").exists()
        assert (synth_dir / "class_descriptions.json").exists()
        assert len(list((synth_dir / "images").glob("*.png"))) == 8

    def test_round_robin_class_assignment(self, synth_dir):
        labels = json.loads((synth_dir / "labels.json").read_text())
        names = [labels[f"synth-{i:04d}"] for i in range(8)]
        assert names[:4] == names[4:]  # 8 images over 4 classes repeats
        assert len(set(names)) == 4

    def test_records_have_one_grounded_box(self, synth_dir):
        records = read_shard(synth_dir / "annotations.jsonl")
        assert len(records) == 8
        for rec in records:
            assert len(rec.boxes) == 1 and len(rec.descriptions) == 1
            assert rec.boxes[0].confidence == 1.0

    def test_captions_never_name_the_class(self, synth_dir):
        records = read_shard(synth_dir / "annotations.jsonl")
        class_words = {w for color, _, shape in class_catalog(4) for w in (color, shape)}
        for rec in records:
            for caption in (rec.original_caption, rec.mllm_caption):
                assert not class_words & set(caption.split())
            # ...but the description does carry the class signal
            desc_words = set(rec.descriptions[0].split())
            assert class_words & desc_words

    def test_box_matches_rendered_marker(self, synth_dir):
        records = read_shard(synth_dir / "annotations.jsonl")
        labels = json.loads((synth_dir / "labels.json").read_text())
        rgb_by_name = {
            class_name(color, shape): rgb for color, rgb, shape in class_catalog(4)
        }
        for rec in records:
            image = load_image(synth_dir / "images" / f"{rec.image_id}.png")
            marker = np.all(image == rgb_by_name[labels[rec.image_id]], axis=-1)
            ys, xs = np.nonzero(marker)
            x0, y0, x1, y1 = to_corners(rec.boxes[0].box)
            size = image.shape[0]
            assert x0 == pytest.approx(xs.min() / size, abs=1e-9)
            assert y0 == pytest.approx(ys.min() / size, abs=1e-9)
            assert x1 == pytest.approx((xs.max() + 1) / size, abs=1e-9)
            assert y1 == pytest.approx((ys.max() + 1) / size, abs=1e-9)

    def test_byte_identical_across_runs(self, tmp_path):
        synth_grounded_dataset(tmp_path / "a", n_images=6, n_classes=3, seed=11)
        synth_grounded_dataset(tmp_path / "b", n_images=6, n_classes=3, seed=11)
        for name in ("annotations.jsonl", "labels.json", "class_descriptions.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        for png in sorted((tmp_path / "a" / "images").glob("*.png")):
            twin = tmp_path / "b" / "images" / png.name
            assert png.read_bytes() == twin.read_bytes()

    def test_seed_changes_pixels(self, tmp_path):
        synth_grounded_dataset(tmp_path / "a", n_images=2, n_classes=2, seed=0)
        synth_grounded_dataset(tmp_path / "b", n_images=2, n_classes=2, seed=1)
        a = load_image(tmp_path / "a" / "images" / "synth-0000.png")
        b = load_image(tmp_path / "b" / "images" / "synth-0000.png")
        assert not np.array_equal(a, b)

    def test_sidecar_metadata(self, synth_dir):
        meta = read_shard_metadata(synth_dir / "annotations.jsonl")
        assert meta["n_records"] == 8
        assert meta["generator"] == "synth"
        assert meta["seed"] == 7
        assert meta["n_classes"] == 4

    def test_class_descriptions_cover_catalog(self, synth_dir):
        mapping = json.loads((synth_dir / "class_descriptions.json").read_text())
        assert set(mapping) == {
            class_name(color, shape) for color, _, shape in class_catalog(4)
        }
        assert all(isinstance(v, list) and v for v in mapping.values())

    def test_fewer_images_than_classes_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            synth_grounded_dataset(tmp_path, n_images=3, n_classes=4)
        with pytest.raises(ConfigError):
            synth_grounded_dataset(tmp_path, n_images=0, n_classes=1)
