"""Record types and shard IO for grounded annotations.

Shards are UTF-8 JSON Lines, one record per image, sorted by image_id, with a
sidecar ``<shard>.meta.json`` describing how they were produced.  Writing the
same records always yields byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image, UnidentifiedImageError

from .boxes import NormBox
from .errors import CorruptImage, SchemaError

SHARD_FIELDS = ("image_id", "original_caption", "mllm_caption", "primary_subject", "descriptions", "boxes")
OPTIONAL_FIELDS = ("caption_fallback",)


@dataclass(frozen=True)
class ImageSample:
    """A raw corpus entry: pixels plus the alt-text style caption."""

    image_id: str
    image: np.ndarray  # (H, W, 3) uint8
    original_caption: str

    def __post_init__(self):
        if not self.image_id:
            raise SchemaError("image_id must be non-empty")
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise SchemaError(f"image must be (H, W, 3), got {self.image.shape}")
        if self.image.shape[0] < 1 or self.image.shape[1] < 1:
            raise SchemaError("image must have positive extent")

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])


@dataclass(frozen=True)
class BoxAnnotation:
    """One grounded description: which description, where, how confident."""

    description_index: int
    box: NormBox
    confidence: float

    def __post_init__(self):
        if self.description_index < 0:
            raise SchemaError(f"description_index must be >= 0, got {self.description_index}")
        if not 0.0 <= self.confidence <= 1.0:
            raise SchemaError(f"confidence must be in [0, 1], got {self.confidence}")


@dataclass
class AnnotationRecord:
    image_id: str
    original_caption: str
    mllm_caption: str
    primary_subject: str
    descriptions: list[str]
    boxes: list[BoxAnnotation] = field(default_factory=list)
    caption_fallback: bool = False

    def __post_init__(self):
        if not self.image_id:
            raise SchemaError("image_id must be non-empty")
        seen = set()
        for b in self.boxes:
            if b.description_index >= len(self.descriptions):
                raise SchemaError(
                    f"box refers to description {b.description_index}, "
                    f"record has {len(self.descriptions)}"
                )
            if b.description_index in seen:
                raise SchemaError(
                    f"duplicate box for description {b.description_index}"
                )
            seen.add(b.description_index)

    def to_json_dict(self) -> dict:
        d = {
            "image_id": self.image_id,
            "original_caption": self.original_caption,
            "mllm_caption": self.mllm_caption,
            "primary_subject": self.primary_subject,
            "descriptions": list(self.descriptions),
            "boxes": [
                [b.description_index, *b.box.as_tuple(), b.confidence] for b in self.boxes
            ],
        }
        if self.caption_fallback:
            d["caption_fallback"] = True
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "AnnotationRecord":
        if not isinstance(d, dict):
            raise SchemaError(f"record must be an object, got {type(d).__name__}")
        missing = [k for k in SHARD_FIELDS if k not in d]
        if missing:
            raise SchemaError(f"missing fields: {', '.join(missing)}")
        unknown = [k for k in d if k not in SHARD_FIELDS and k not in OPTIONAL_FIELDS]
        if unknown:
            raise SchemaError(f"unknown fields: {', '.join(sorted(unknown))}")
        for key in ("image_id", "original_caption", "mllm_caption", "primary_subject"):
            if not isinstance(d[key], str):
                raise SchemaError(f"{key} must be a string")
        if not isinstance(d["descriptions"], list) or not all(
            isinstance(s, str) for s in d["descriptions"]
        ):
            raise SchemaError("descriptions must be a list of strings")
        if not isinstance(d["boxes"], list):
            raise SchemaError("boxes must be a list")
        boxes = []
        for row in d["boxes"]:
            if not isinstance(row, list) or len(row) != 6:
                raise SchemaError(f"box row must be [idx, cx, cy, w, h, conf], got {row!r}")
            idx, cx, cy, w, h, conf = row
            if not isinstance(idx, int) or isinstance(idx, bool):
                raise SchemaError(f"description index must be an integer, got {idx!r}")
            try:
                box = NormBox(float(cx), float(cy), float(w), float(h))
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"invalid box geometry: {exc}") from exc
            boxes.append(BoxAnnotation(idx, box, float(conf)))
        fallback = d.get("caption_fallback", False)
        if not isinstance(fallback, bool):
            raise SchemaError("caption_fallback must be a boolean")
        return cls(
            image_id=d["image_id"],
            original_caption=d["original_caption"],
            mllm_caption=d["mllm_caption"],
            primary_subject=d["primary_subject"],
            descriptions=list(d["descriptions"]),
            boxes=boxes,
            caption_fallback=fallback,
        )


def _record_line(record: AnnotationRecord) -> str:
    return json.dumps(record.to_json_dict(), ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def meta_path(shard_path) -> Path:
    return Path(str(shard_path) + ".meta.json")


def write_shard(records: Iterable[AnnotationRecord], path, metadata: dict | None = None) -> Path:
    """Write records sorted by image_id plus the sidecar metadata file."""
    path = Path(path)
    ordered = sorted(records, key=lambda r: r.image_id)
    ids = [r.image_id for r in ordered]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise SchemaError(f"duplicate image_id in shard: {', '.join(dupes)}")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in ordered:
            f.write(_record_line(rec))
            f.write("\n")
    meta = {"n_records": len(ordered)}
    meta.update(metadata or {})
    with open(meta_path(path), "w", encoding="utf-8", newline="\n") as f:
        json.dump(meta, f, ensure_ascii=False, sort_keys=True, indent=2)
        f.write("\n")
    return path


def read_shard(path) -> list[AnnotationRecord]:
    """Parse a shard, reporting the first bad line by number."""
    records = []
    seen_ids = set()
    with open(path, encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc}", line_number=line_number) from exc
            try:
                rec = AnnotationRecord.from_json_dict(payload)
            except SchemaError as exc:
                raise SchemaError(str(exc.args[0]), line_number=line_number) from exc
            if rec.image_id in seen_ids:
                raise SchemaError(
                    f"duplicate image_id {rec.image_id!r}", line_number=line_number
                )
            seen_ids.add(rec.image_id)
            records.append(rec)
    return records


def read_shard_metadata(path) -> dict:
    mp = meta_path(path)
    if not mp.exists():
        return {}
    with open(mp, encoding="utf-8") as f:
        return json.load(f)


def inspect_shard(path) -> dict:
    """Summary statistics for a shard: counts, a boxes-per-record histogram,
    and description length stats.  Malformed lines raise SchemaError."""
    records = read_shard(path)
    n_boxes = sum(len(r.boxes) for r in records)
    n_desc = sum(len(r.descriptions) for r in records)
    n_fallback = sum(1 for r in records if r.caption_fallback)
    confidences = [b.confidence for r in records for b in r.boxes]
    box_histogram: dict[str, int] = {}
    for r in records:
        key = str(len(r.boxes))
        box_histogram[key] = box_histogram.get(key, 0) + 1
    desc_lengths = [len(d) for r in records for d in r.descriptions]
    return {
        "path": str(path),
        "n_records": len(records),
        "n_descriptions": n_desc,
        "n_boxes": n_boxes,
        "n_caption_fallbacks": n_fallback,
        "boxes_per_record_histogram": box_histogram,
        "description_length": {
            "min": min(desc_lengths) if desc_lengths else None,
            "max": max(desc_lengths) if desc_lengths else None,
            "mean": round(sum(desc_lengths) / len(desc_lengths), 2) if desc_lengths else None,
        },
        "min_confidence": min(confidences) if confidences else None,
        "max_confidence": max(confidences) if confidences else None,
        "metadata": read_shard_metadata(path),
    }


def load_image(path) -> np.ndarray:
    """Decode an image file to (H, W, 3) uint8, raising CorruptImage on failure."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise CorruptImage(f"cannot decode {path}: {exc}") from exc


def load_samples_from_manifest(manifest_path) -> list[ImageSample]:
    """Read a JSONL manifest of {image_id, image_path, caption} rows.

    Relative image paths resolve against the manifest's directory.
    """
    root = Path(manifest_path).parent
    samples = []
    with open(manifest_path, encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc}", line_number=line_number) from exc
            for key in ("image_id", "image_path", "caption"):
                if key not in row:
                    raise SchemaError(f"missing field {key}", line_number=line_number)
            img_path = Path(row["image_path"])
            if not img_path.is_absolute():
                img_path = root / img_path
            samples.append(
                ImageSample(
                    image_id=row["image_id"],
                    image=load_image(img_path),
                    original_caption=row["caption"],
                )
            )
    return samples
