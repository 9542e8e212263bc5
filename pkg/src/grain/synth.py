"""Synthetic grounded corpus: one small colored shape per image.

Each class is a (color, shape) combination.  The marker is drawn at a random
position on a noisy gray background and its box is computed from the drawn
pixel mask, so every record's box encloses the shape exactly.  Captions are
class-agnostic (they never mention color or shape), which forces any
class-discriminative signal through the region descriptions.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .annotation import PIPELINE_VERSION, rescale_to_normalized
from .data import AnnotationRecord, BoxAnnotation, write_shard
from .errors import ConfigError

COLORS: list[tuple[str, tuple[int, int, int]]] = [
    ("red", (220, 40, 40)),
    ("green", (40, 190, 60)),
    ("blue", (50, 80, 230)),
    ("yellow", (235, 220, 50)),
    ("purple", (150, 60, 200)),
    ("cyan", (60, 210, 220)),
    ("orange", (240, 140, 30)),
    ("white", (245, 245, 245)),
]

SHAPES = ["square", "circle", "triangle", "ring"]


def class_catalog(n_classes: int) -> list[tuple[str, tuple[int, int, int], str]]:
    """First n (color_name, rgb, shape) combinations, color-major."""
    max_classes = len(COLORS) * len(SHAPES)
    if not 1 <= n_classes <= max_classes:
        raise ConfigError(f"n_classes must be in [1, {max_classes}], got {n_classes}")
    catalog = []
    for color_name, rgb in COLORS:
        for shape in SHAPES:
            catalog.append((color_name, rgb, shape))
    return catalog[:n_classes]


def class_name(color: str, shape: str) -> str:
    return f"{color} {shape}"


def class_description(color: str, shape: str) -> str:
    return f"a small {color} {shape} marker"


def _shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean (size, size) stencil of the marker."""
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        return (xx - c) ** 2 + (yy - c) ** 2 <= (size / 2.0) ** 2
    if shape == "triangle":
        # upright triangle: apex at top center, base along the bottom row
        half_width = (xx - c).__abs__()
        return half_width * 2 <= yy + 1
    if shape == "ring":
        r_outer = size / 2.0
        r_inner = size / 4.0
        d2 = (xx - c) ** 2 + (yy - c) ** 2
        return (d2 <= r_outer**2) & (d2 >= r_inner**2)
    raise ConfigError(f"unknown shape {shape!r}")


def render_scene(
    rng: np.random.Generator,
    image_size: int,
    rgb: tuple[int, int, int],
    shape: str,
) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Draw one marker on a noisy gray field.

    Returns the (H, W, 3) uint8 image and the tight pixel box
    (x0, y0, x1, y1) with exclusive upper corners, taken from the stencil's
    nonzero extent.
    """
    base = int(rng.integers(90, 120))
    image = np.full((image_size, image_size, 3), base, dtype=np.int16)
    image += rng.integers(-8, 9, size=image.shape, dtype=np.int16)

    min_side = max(6, image_size // 4)
    max_side = max(min_side + 1, image_size // 2)
    side = int(rng.integers(min_side, max_side))
    x0 = int(rng.integers(0, image_size - side + 1))
    y0 = int(rng.integers(0, image_size - side + 1))
    mask = _shape_mask(shape, side)
    ys, xs = np.nonzero(mask)
    patch = image[y0 : y0 + side, x0 : x0 + side]
    patch[ys, xs] = np.array(rgb, dtype=np.int16)

    box = (x0 + int(xs.min()), y0 + int(ys.min()), x0 + int(xs.max()) + 1, y0 + int(ys.max()) + 1)
    return np.clip(image, 0, 255).astype(np.uint8), box


def synth_grounded_dataset(
    out_dir,
    n_images: int,
    n_classes: int,
    seed: int = 0,
    image_size: int = 32,
) -> Path:
    """Generate images, a grounded shard, and eval-side class files.

    Classes round-robin over images (image i gets class i % n_classes).
    Writes out_dir/images/*.png, out_dir/annotations.jsonl (+ sidecar),
    out_dir/labels.json, and out_dir/class_descriptions.json.  Returns the
    shard path.
    """
    if n_images < 1:
        raise ConfigError(f"n_images must be >= 1, got {n_images}")
    if n_images < n_classes:
        raise ConfigError(f"n_images ({n_images}) must cover all {n_classes} classes")
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    catalog = class_catalog(n_classes)

    records = []
    labels: dict[str, str] = {}
    for i in range(n_images):
        color_name, rgb, shape = catalog[i % n_classes]
        rng = np.random.default_rng([seed, i])
        image, pixel_box = render_scene(rng, image_size, rgb, shape)
        image_id = f"synth-{i:04d}"
        Image.fromarray(image).save(image_dir / f"{image_id}.png")
        box = rescale_to_normalized(pixel_box, image_size, image_size)
        records.append(
            AnnotationRecord(
                image_id=image_id,
                original_caption=f"synthetic scene {i:04d} with a small marker on a plain background",
                mllm_caption=f"view {i:04d}: one small colored marker on a gray field",
                primary_subject="colored marker",
                descriptions=[class_description(color_name, shape)],
                boxes=[BoxAnnotation(0, box, 1.0)],
            )
        )
        labels[image_id] = class_name(color_name, shape)

    shard_path = write_shard(
        records,
        out_dir / "annotations.jsonl",
        {
            "pipeline_version": PIPELINE_VERSION,
            "generator": "synth",
            "seed": seed,
            "n_classes": n_classes,
            "image_size": image_size,
        },
    )
    with open(out_dir / "labels.json", "w", encoding="utf-8") as f:
        json.dump(labels, f, ensure_ascii=False, sort_keys=True, indent=2)
    class_descriptions = {
        class_name(color, shape): [class_description(color, shape)]
        for color, _, shape in catalog
    }
    with open(out_dir / "class_descriptions.json", "w", encoding="utf-8") as f:
        json.dump(class_descriptions, f, ensure_ascii=False, sort_keys=True, indent=2)
    return shard_path
