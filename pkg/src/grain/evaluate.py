"""Zero-shot evaluation: classification, description-based classification,
retrieval, free-text vocabulary mapping, and grounding dumps.

Everything here works against a minimal encoder interface -- an object with
``embed_images(images) -> (N, E)`` and ``embed_texts(texts) -> (N, E)``
returning unit-norm rows -- so trained models and hand-built fixtures are
interchangeable.  Evaluation never mutates parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import torch

from .errors import ConfigError, NormalizationError, ShapeError
from .model import GrainModel, preprocess_images
from .tokenizer import Tokenizer

CLASS_TEMPLATE = "a photo of a {classname}"
DESCRIPTION_TEMPLATE = "{classname}, which {description}"


@runtime_checkable
class Encoder(Protocol):
    def embed_images(self, images) -> np.ndarray: ...

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray: ...


class GrainEncoder:
    """Adapter putting a trained model behind the encoder interface."""

    def __init__(self, model: GrainModel, tokenizer: Tokenizer | None = None, batch_size: int = 64):
        self.model = model.eval()
        self.tokenizer = tokenizer or Tokenizer.default()
        self.batch_size = batch_size

    @torch.no_grad()
    def embed_images(self, images) -> np.ndarray:
        if isinstance(images, np.ndarray) and images.ndim == 3:
            images = images[None]
        chunks = []
        for start in range(0, len(images), self.batch_size):
            batch = preprocess_images(list(images[start : start + self.batch_size]))
            chunks.append(self.model.encode_image(batch).numpy())
        return np.concatenate(chunks) if chunks else np.zeros((0, self.model.config.embed_dim))

    @torch.no_grad()
    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        chunks = []
        for start in range(0, len(texts), self.batch_size):
            ids = self.tokenizer.encode_batch(texts[start : start + self.batch_size])
            chunks.append(self.model.encode_text(ids).numpy())
        return np.concatenate(chunks) if chunks else np.zeros((0, self.model.config.embed_dim))


@dataclass
class ClassPromptSet:
    classname: str
    descriptions: list[str] = field(default_factory=list)


@dataclass
class MetricReport:
    dataset: str
    n_samples: int
    top1: float | None = None
    per_class: dict[str, float] | None = None
    recall_at: dict[str, float] | None = None

    def to_json_dict(self) -> dict:
        out = {"dataset": self.dataset, "n_samples": self.n_samples}
        if self.top1 is not None:
            out["top1"] = self.top1
        if self.per_class is not None:
            out["per_class"] = self.per_class
        if self.recall_at is not None:
            out["recall_at"] = self.recall_at
        return out

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json_dict(), f, ensure_ascii=False, sort_keys=True, indent=2)
            f.write("\n")
        return path


def _dedupe(items: Sequence[str]) -> list[str]:
    seen = set()
    out = []
    for item in items:
        if item not in seen:
            seen.add(item)
            out.append(item)
    return out


def _renormalize(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    if (norms < 1e-12).any():
        raise NormalizationError("zero-norm class embedding")
    return rows / norms


def build_classifier(
    prompt_sets: Sequence[ClassPromptSet],
    model: Encoder,
    class_template: str = CLASS_TEMPLATE,
    description_template: str = DESCRIPTION_TEMPLATE,
) -> np.ndarray:
    """(C, E) unit-norm class embeddings.

    Each class averages the bare class prompt with one description prompt per
    distinct description, then renormalizes.  Templates can be swapped per
    dataset.
    """
    if not prompt_sets:
        raise ConfigError("need at least one class")
    rows = []
    for ps in prompt_sets:
        prompts = [class_template.format(classname=ps.classname)]
        prompts += [
            description_template.format(classname=ps.classname, description=d)
            for d in _dedupe(ps.descriptions)
        ]
        embeds = np.asarray(model.embed_texts(prompts))
        rows.append(embeds.mean(axis=0))
    return _renormalize(np.stack(rows))


def _accuracy_report(
    preds: np.ndarray,
    labels: np.ndarray,
    classnames: Sequence[str] | None,
    dataset: str,
) -> MetricReport:
    correct = preds == labels
    per_class = {}
    for c in np.unique(labels):
        name = classnames[c] if classnames is not None else str(int(c))
        per_class[name] = float(correct[labels == c].mean())
    return MetricReport(
        dataset=dataset,
        n_samples=int(labels.shape[0]),
        top1=float(correct.mean()),
        per_class=per_class,
    )


def classify(
    images,
    labels: Sequence[int],
    classifier: np.ndarray,
    model: Encoder,
    classnames: Sequence[str] | None = None,
    dataset: str = "",
) -> tuple[np.ndarray, MetricReport]:
    """Argmax cosine against the class embeddings; ties go to the lowest
    class index."""
    labels = np.asarray(labels, dtype=np.int64)
    image_embeds = np.asarray(model.embed_images(images))
    if image_embeds.shape[0] != labels.shape[0]:
        raise ShapeError(
            f"{image_embeds.shape[0]} images vs {labels.shape[0]} labels"
        )
    sims = image_embeds @ classifier.T
    preds = sims.argmax(axis=1)
    return preds, _accuracy_report(preds, labels, classnames, dataset)


def classify_by_attributes(
    images,
    labels: Sequence[int],
    prompt_sets: Sequence[ClassPromptSet],
    model: Encoder,
    dataset: str = "",
) -> tuple[np.ndarray, MetricReport]:
    """Classification from descriptions alone: a class scores the mean
    similarity of its description embeddings.  Class names never enter the
    prompts."""
    for ps in prompt_sets:
        if not ps.descriptions:
            raise ConfigError(f"class {ps.classname!r} has no descriptions")
    labels = np.asarray(labels, dtype=np.int64)
    image_embeds = np.asarray(model.embed_images(images))
    scores = np.empty((image_embeds.shape[0], len(prompt_sets)))
    for c, ps in enumerate(prompt_sets):
        desc_embeds = np.asarray(model.embed_texts(_dedupe(ps.descriptions)))
        scores[:, c] = (image_embeds @ desc_embeds.T).mean(axis=1)
    preds = scores.argmax(axis=1)
    return preds, _accuracy_report(preds, labels, [ps.classname for ps in prompt_sets], dataset)


def _recall_topk(sims: np.ndarray, gt_sets: list[set[int]], ks: Sequence[int]) -> dict[int, float]:
    """Fraction of queries whose top-k (stable-sorted) contains a gt index."""
    order = np.argsort(-sims, axis=1, kind="stable")
    out = {}
    for k in ks:
        hits = [bool(gt_sets[q] & set(order[q, :k].tolist())) for q in range(sims.shape[0])]
        out[k] = float(np.mean(hits)) if hits else 0.0
    return out


def retrieve(
    image_embeds: np.ndarray,
    text_embeds: np.ndarray,
    text_groups: Sequence[Sequence[int]] | None = None,
    ks: Sequence[int] = (1, 5, 10),
    dataset: str = "",
) -> MetricReport:
    """Image-to-text and text-to-image Recall@k.

    text_groups[i] holds the indices of image i's captions (identity pairing
    by default).  Every text must belong to exactly one image.
    """
    image_embeds = np.asarray(image_embeds)
    text_embeds = np.asarray(text_embeds)
    n_img, n_txt = image_embeds.shape[0], text_embeds.shape[0]
    if text_groups is None:
        if n_img != n_txt:
            raise ShapeError("identity pairing needs equal image and text counts")
        text_groups = [[i] for i in range(n_img)]
    if len(text_groups) != n_img:
        raise ShapeError(f"{len(text_groups)} groups for {n_img} images")
    owner = {}
    for i, group in enumerate(text_groups):
        for t in group:
            if t in owner:
                raise ShapeError(f"text {t} appears in two groups")
            owner[t] = i
    if set(owner) != set(range(n_txt)):
        raise ShapeError("text_groups must cover every text exactly once")

    sims = image_embeds @ text_embeds.T
    i2t = _recall_topk(sims, [set(g) for g in text_groups], ks)
    t2i = _recall_topk(sims.T, [{owner[t]} for t in range(n_txt)], ks)
    recall = {f"i2t@{k}": v for k, v in i2t.items()}
    recall.update({f"t2i@{k}": v for k, v in t2i.items()})
    return MetricReport(dataset=dataset, n_samples=n_img, recall_at=recall)


@torch.no_grad()
def classify_by_region_match(
    images,
    labels: Sequence[int],
    prompt_sets: Sequence[ClassPromptSet],
    model: GrainModel,
    tokenizer: Tokenizer | None = None,
    dataset: str = "",
) -> tuple[np.ndarray, MetricReport]:
    """Classification through the region pathway: a class scores the best
    cosine between any of its description embeddings and any region of the
    image.  This isolates how well regions align with descriptions."""
    for ps in prompt_sets:
        if not ps.descriptions:
            raise ConfigError(f"class {ps.classname!r} has no descriptions")
    tokenizer = tokenizer or Tokenizer.default()
    model.eval()
    labels = np.asarray(labels, dtype=np.int64)
    desc_embeds = []
    for ps in prompt_sets:
        ids = tokenizer.encode_batch(_dedupe(ps.descriptions))
        desc_embeds.append(model.encode_text(ids))
    scores = np.empty((len(images), len(prompt_sets)))
    for start in range(0, len(images), 32):
        chunk = list(images[start : start + 32])
        outputs = model(preprocess_images(chunk), with_boxes=False)
        for c, embeds in enumerate(desc_embeds):
            sims = torch.einsum("bqe,de->bqd", outputs.region_embeds, embeds)
            scores[start : start + len(chunk), c] = sims.amax(dim=(1, 2)).numpy()
    preds = scores.argmax(axis=1)
    return preds, _accuracy_report(preds, labels, [ps.classname for ps in prompt_sets], dataset)


def map_free_text_to_vocab(
    answer: str, vocabulary: Sequence[str], model: Encoder
) -> tuple[str | None, bool]:
    """Nearest vocabulary entry by embedding similarity.

    Returns (match, was_empty); empty answers map to (None, True) instead of
    being force-matched.
    """
    if not vocabulary:
        raise ConfigError("vocabulary must be non-empty")
    if not answer.strip():
        return None, True
    query = np.asarray(model.embed_texts([answer]))[0]
    vocab_embeds = np.asarray(model.embed_texts(list(vocabulary)))
    best = int(np.argmax(vocab_embeds @ query))
    return vocabulary[best], False


@torch.no_grad()
def dump_groundings(
    images,
    image_ids: Sequence[str],
    descriptions: Sequence[str],
    model: GrainModel,
    tokenizer: Tokenizer | None = None,
    out_path=None,
) -> list[dict]:
    """Per image: predicted boxes plus, per description, the best-matching
    region and its cosine similarity.  Optionally written as JSONL."""
    tokenizer = tokenizer or Tokenizer.default()
    model.eval()
    if len(image_ids) != len(images):
        raise ShapeError(f"{len(images)} images vs {len(image_ids)} ids")
    desc_embeds = model.encode_text(tokenizer.encode_batch(descriptions)) if descriptions else None
    entries = []
    for start in range(0, len(images), 32):
        chunk = list(images[start : start + 32])
        outputs = model(preprocess_images(chunk), with_boxes=True)
        sims = (
            torch.einsum("de,bqe->bdq", desc_embeds, outputs.region_embeds)
            if desc_embeds is not None
            else None
        )
        for j in range(len(chunk)):
            entry = {
                "image_id": image_ids[start + j],
                "pred_boxes": [
                    [round(v, 6) for v in row] for row in outputs.pred_boxes[j].tolist()
                ],
                "matches": [],
            }
            if sims is not None:
                best = sims[j].argmax(dim=1)
                for d, description in enumerate(descriptions):
                    q = int(best[d])
                    entry["matches"].append(
                        {
                            "description": description,
                            "region_index": q,
                            "similarity": round(float(sims[j, d, q]), 6),
                            "box": [round(v, 6) for v in outputs.pred_boxes[j, q].tolist()],
                        }
                    )
            entries.append(entry)
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", encoding="utf-8") as f:
            for entry in entries:
                f.write(json.dumps(entry, ensure_ascii=False, sort_keys=True) + "\n")
    return entries
