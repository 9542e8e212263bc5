"""Synthetic grounded-annotation pipeline.

Stage one asks a generation client for the primary subject, a feature list
for that subject, and a one-line caption.  Stage two turns each feature
description into a short attribute query, asks a detection client for boxes,
and keeps at most one box per description after confidence filtering and
greedy NMS over the pooled proposals.  Output is a sorted JSONL shard plus a
sidecar recording the pipeline settings.
"""

from __future__ import annotations

import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .boxes import NormBox, from_corners, iou
from .clients import (
    KIND_CAPTION,
    KIND_FEATURES,
    KIND_SUBJECT,
    DetectionClient,
    GenerationClient,
)
from .data import AnnotationRecord, BoxAnnotation, ImageSample, write_shard
from .errors import ClientFailure, DegenerateBox
from .runlog import log_event

PROMPT_SUBJECT = "What is the primary visual subject in this image? Answer in 2-3 words at most."
PROMPT_FEATURES = "What are some distinguishing visual features of this {subject}? Answer as a concise list of features"
PROMPT_CAPTION = "Describe this image in one line"

PIPELINE_VERSION = "annotate-1"

_ARTICLE_RE = re.compile(r"^(a|an|the)\s+", flags=re.IGNORECASE)
_BULLET_RE = re.compile(r"^[\s\-\*•\d\.\)]+")


@dataclass
class AnnotateConfig:
    conf_threshold: float = 0.3
    nms_iou: float = 0.5
    retries: int = 2
    backoff: float = 0.1
    workers: int = 1


@dataclass(frozen=True)
class DetectorProposal:
    """A thresholded, normalized detector hit for one query string."""

    box: NormBox
    score: float
    query: str


def _with_retries(fn: Callable, retries: int, backoff: float):
    """Call fn(), retrying ClientFailure with exponential backoff."""
    for attempt in range(retries + 1):
        try:
            return fn()
        except ClientFailure:
            if attempt == retries:
                raise
            time.sleep(backoff * (2**attempt))


def _fold_line(text: str) -> str:
    return " ".join(text.split())


def elicit_subject(
    client: GenerationClient, sample: ImageSample, retries: int = 2, backoff: float = 0.1
) -> str:
    reply = _with_retries(
        lambda: client.generate(sample, PROMPT_SUBJECT, KIND_SUBJECT), retries, backoff
    )
    subject = _fold_line(reply).strip().strip(".")
    if not subject:
        raise ClientFailure(f"empty subject reply for image {sample.image_id!r}")
    return subject


def elicit_descriptions(
    client: GenerationClient,
    sample: ImageSample,
    subject: str,
    retries: int = 2,
    backoff: float = 0.1,
) -> list[str]:
    """Feature list for the subject; one description per non-empty line,
    bullets and list numbering stripped."""
    prompt = PROMPT_FEATURES.format(subject=subject)
    reply = _with_retries(
        lambda: client.generate(sample, prompt, KIND_FEATURES), retries, backoff
    )
    descriptions = []
    for line in reply.splitlines():
        line = _BULLET_RE.sub("", line).strip()
        if line:
            descriptions.append(line)
    return descriptions


def elicit_mllm_caption(
    client: GenerationClient, sample: ImageSample, retries: int = 2, backoff: float = 0.1
) -> str:
    reply = _with_retries(
        lambda: client.generate(sample, PROMPT_CAPTION, KIND_CAPTION), retries, backoff
    )
    caption = _fold_line(reply)
    if not caption:
        raise ClientFailure(f"empty caption reply for image {sample.image_id!r}")
    return caption


def extract_attribute(description: str) -> str:
    """Short detector query from a description: text up to the first comma or
    semicolon, lowercased, leading article dropped."""
    head = re.split(r"[,;]", description, maxsplit=1)[0]
    head = _ARTICLE_RE.sub("", head.strip())
    return head.strip().lower()


def rescale_to_normalized(
    box_pixels: Sequence[float], source_w: int, source_h: int
) -> NormBox:
    """Pixel corners (x0, y0, x1, y1) -> NormBox fractions of the source image."""
    x0, y0, x1, y1 = box_pixels
    if x1 <= x0 or y1 <= y0:
        raise DegenerateBox(f"degenerate pixel box ({x0}, {y0}, {x1}, {y1})")
    if source_w <= 0 or source_h <= 0:
        raise DegenerateBox(f"bad source extent {source_w}x{source_h}")
    clamp = lambda v: min(max(v, 0.0), 1.0)
    return from_corners(
        clamp(x0 / source_w), clamp(y0 / source_h), clamp(x1 / source_w), clamp(y1 / source_h)
    )


def localize(
    client: DetectionClient,
    sample: ImageSample,
    query: str,
    conf_threshold: float,
    retries: int = 2,
    backoff: float = 0.1,
) -> list[DetectorProposal]:
    """Detector hits for a query: normalized, confidence-filtered, sorted by
    descending score (ties keep client order)."""
    hits = _with_retries(lambda: client.detect(sample, query), retries, backoff)
    proposals = []
    for x0, y0, x1, y1, score in hits:
        if score < conf_threshold:
            continue
        try:
            box = rescale_to_normalized((x0, y0, x1, y1), sample.width, sample.height)
        except DegenerateBox:
            log_event("degenerate_detection", image_id=sample.image_id, query=query)
            continue
        proposals.append(DetectorProposal(box=box, score=float(score), query=query))
    proposals.sort(key=lambda p: -p.score)
    return proposals


def nms_keep_indices(
    boxes: Sequence[NormBox], scores: Sequence[float], iou_threshold: float
) -> list[int]:
    """Greedy NMS; returns kept indices in descending-score order (ties keep
    input order)."""
    order = sorted(range(len(boxes)), key=lambda i: -scores[i])
    kept: list[int] = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) <= iou_threshold for j in kept):
            kept.append(i)
    return kept


def nms_dedupe(
    proposals: Sequence[DetectorProposal], iou_threshold: float
) -> list[DetectorProposal]:
    kept = nms_keep_indices([p.box for p in proposals], [p.score for p in proposals], iou_threshold)
    return [proposals[i] for i in kept]


def annotate_record(
    sample: ImageSample,
    gen_client: GenerationClient,
    det_client: DetectionClient,
    config: AnnotateConfig,
) -> AnnotationRecord | None:
    """Run the full pipeline on one image.  Returns None when the subject or
    feature stage fails outright (the image is skipped)."""
    try:
        subject = elicit_subject(gen_client, sample, config.retries, config.backoff)
        descriptions = elicit_descriptions(
            gen_client, sample, subject, config.retries, config.backoff
        )
    except ClientFailure as exc:
        log_event("annotation_skipped", image_id=sample.image_id, reason=str(exc))
        return None

    try:
        mllm_caption = elicit_mllm_caption(gen_client, sample, config.retries, config.backoff)
        fallback = False
    except ClientFailure:
        mllm_caption = sample.original_caption
        fallback = True
        log_event("caption_fallback", image_id=sample.image_id)

    # Pool proposals across descriptions so NMS can collapse near-duplicates
    # that different descriptions ground to the same object.
    pooled: list[tuple[int, DetectorProposal]] = []
    for desc_index, description in enumerate(descriptions):
        query = extract_attribute(description)
        if not query:
            continue
        try:
            found = localize(
                det_client, sample, query, config.conf_threshold, config.retries, config.backoff
            )
        except ClientFailure as exc:
            log_event(
                "localization_failed", image_id=sample.image_id, query=query, reason=str(exc)
            )
            continue
        pooled.extend((desc_index, p) for p in found)

    kept = nms_keep_indices(
        [p.box for _, p in pooled], [p.score for _, p in pooled], config.nms_iou
    )
    best_by_desc: dict[int, DetectorProposal] = {}
    for i in kept:  # kept is score-descending, so first hit per index wins
        desc_index, proposal = pooled[i]
        if desc_index not in best_by_desc:
            best_by_desc[desc_index] = proposal
    boxes = [
        BoxAnnotation(idx, best_by_desc[idx].box, best_by_desc[idx].score)
        for idx in sorted(best_by_desc)
    ]
    return AnnotationRecord(
        image_id=sample.image_id,
        original_caption=sample.original_caption,
        mllm_caption=mllm_caption,
        primary_subject=subject,
        descriptions=descriptions,
        boxes=boxes,
        caption_fallback=fallback,
    )


def annotate_corpus(
    samples: Iterable[ImageSample],
    gen_client: GenerationClient,
    det_client: DetectionClient,
    config: AnnotateConfig,
    out_path,
):
    """Annotate every sample and write the shard.  Output bytes depend only
    on the sample set and config, not on input order or worker count."""
    samples = list(samples)
    worker = lambda s: annotate_record(s, gen_client, det_client, config)
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(worker, samples))
    else:
        results = [worker(s) for s in samples]
    records = [r for r in results if r is not None]
    metadata = {
        "pipeline_version": PIPELINE_VERSION,
        "conf_threshold": config.conf_threshold,
        "nms_iou": config.nms_iou,
        "generation_client": gen_client.identifier,
        "detection_client": det_client.identifier,
        "n_input_samples": len(samples),
        "n_skipped": len(samples) - len(records),
        "n_caption_fallbacks": sum(1 for r in records if r.caption_fallback),
    }
    return write_shard(records, out_path, metadata)
