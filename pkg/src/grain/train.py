"""Deterministic training loop.

All randomness derives functionally from (seed, epoch): the shuffle order and
the per-record caption coin-flips are drawn fresh from named streams at the
top of each epoch, so a run can be stopped at any checkpoint and resumed to
the exact parameters of an uninterrupted run.  Losses are logged as JSON
lines; checkpoints carry the model config, optimizer state, and a format
version that loaders verify.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import TrainConfig
from .data import AnnotationRecord, load_image
from .errors import ConfigError, NonFiniteLoss, ShapeError
from .losses import (
    LossBreakdown,
    batch_box_loss,
    image_caption_loss,
    region_description_loss,
)
from .matching import match_batch
from .model import GrainModel, ModelConfig, parameter_digest, preprocess_images
from .runlog import log_event
from .tokenizer import Tokenizer

CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_NAME = "checkpoint_latest.pt"
LOSS_LOG_NAME = "loss_log.jsonl"


def lr_at(step: int, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to peak_lr, then cosine decay to zero at total_steps."""
    if total_steps < 1:
        raise ConfigError("total_steps must be >= 1")
    if not 0 <= warmup_steps < total_steps:
        raise ConfigError(f"warmup_steps must be in [0, total_steps), got {warmup_steps}")
    if step < warmup_steps:
        return peak_lr * (step + 1) / (warmup_steps + 1)
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _caption_for_draw(record: AnnotationRecord, draw: float, swap_prob: float, use_mllm: bool) -> str:
    if use_mllm and draw < swap_prob:
        return record.mllm_caption
    return record.original_caption


def choose_caption(
    record: AnnotationRecord,
    rng: np.random.Generator,
    swap_prob: float = 0.5,
    use_mllm: bool = True,
) -> str:
    """Pick the synthetic caption with probability swap_prob, else the original."""
    return _caption_for_draw(record, float(rng.random()), swap_prob, use_mllm)


@dataclass
class GroundedBatch:
    image_ids: list[str]
    images: torch.Tensor  # (B, 3, S, S)
    caption_ids: torch.Tensor  # (B, L)
    gt_boxes: list[torch.Tensor]  # per image, (m_i, 4) cxcywh
    description_ids: torch.Tensor  # (sum m_i, L), image order
    desc_slices: list[tuple[int, int]]  # per image range into description_ids

    def __len__(self) -> int:
        return len(self.image_ids)


def assemble_batch(
    records: Sequence[AnnotationRecord],
    images: Sequence[np.ndarray],
    captions: Sequence[str],
    tokenizer: Tokenizer,
) -> GroundedBatch:
    """Tensors for one step.  Only descriptions that actually have a box
    become ground truth; gt boxes and their descriptions stay index-aligned.
    """
    if not (len(records) == len(images) == len(captions)):
        raise ShapeError("records, images, and captions must align")
    gt_boxes, desc_texts, desc_slices = [], [], []
    for rec in records:
        start = len(desc_texts)
        rows = []
        for ann in rec.boxes:
            rows.append(ann.box.as_tuple())
            desc_texts.append(rec.descriptions[ann.description_index])
        gt_boxes.append(torch.tensor(rows, dtype=torch.float32).reshape(-1, 4))
        desc_slices.append((start, len(desc_texts)))
    return GroundedBatch(
        image_ids=[r.image_id for r in records],
        images=preprocess_images(list(images)),
        caption_ids=tokenizer.encode_batch(captions),
        gt_boxes=gt_boxes,
        description_ids=tokenizer.encode_batch(desc_texts),
        desc_slices=desc_slices,
    )


def train_step(
    model: GrainModel,
    batch: GroundedBatch,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    lr: float,
) -> LossBreakdown:
    """One optimization step; returns the (detached) loss parts."""
    for group in optimizer.param_groups:
        group["lr"] = lr
    need_regions = cfg.use_box_loss or cfg.use_rd_loss
    outputs = model(
        batch.images,
        caption_ids=batch.caption_ids,
        description_ids=batch.description_ids if need_regions else None,
        with_boxes=need_regions,
    )
    scale = model.scaled_logit()
    l_ic = image_caption_loss(outputs.image_embed, outputs.caption_embed, scale)
    l_box = l_ic.new_zeros(())
    l_rd = l_ic.new_zeros(())
    if need_regions:
        assignments = match_batch(
            batch.gt_boxes, outputs.pred_boxes, cfg.cost_l1_weight, cfg.cost_giou_weight
        )
        if cfg.use_box_loss:
            l_box = batch_box_loss(batch.gt_boxes, outputs.pred_boxes, assignments, cfg.use_giou)
        if cfg.use_rd_loss:
            per_image = (
                [outputs.description_embeds[s:e] for s, e in batch.desc_slices]
                if outputs.description_embeds is not None
                else [outputs.image_embed.new_zeros((0, model.config.embed_dim)) for _ in batch.desc_slices]
            )
            l_rd = region_description_loss(outputs.region_embeds, per_image, assignments, scale)
    total = l_ic + l_box + l_rd
    if not torch.isfinite(total):
        raise NonFiniteLoss(
            f"non-finite loss (ic={float(l_ic.detach())}, box={float(l_box.detach())}, "
            f"rd={float(l_rd.detach())}) on batch {batch.image_ids}"
        )
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return LossBreakdown(
        float(l_ic.detach()), float(l_box.detach()), float(l_rd.detach())
    )


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(
    path,
    model: GrainModel,
    optimizer: torch.optim.Optimizer,
    train_cfg: TrainConfig,
    global_step: int,
    tokenizer_id: str,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "model_config": model.config.to_dict(),
            "train_config": train_cfg.to_dict(),
            "tokenizer_id": tokenizer_id,
            "model_state": model.state_dict(),
            "optimizer_state": optimizer.state_dict(),
            "global_step": global_step,
        },
        path,
    )
    return path


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            f"checkpoint {path} has format_version {version!r}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    return payload


def restore_model(payload: dict) -> GrainModel:
    model = GrainModel(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["model_state"])
    return model


# -- the loop -----------------------------------------------------------------


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0]).permutation(n)

def _epoch_caption_draws(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 1]).random(n)


def fit(
    records: Sequence[AnnotationRecord],
    image_dir,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir,
    tokenizer: Tokenizer | None = None,
    resume: bool = False,
) -> Path:
    """Train on grounded records whose images live at image_dir/{id}.png.

    Writes loss_log.jsonl and checkpoint_latest.pt under out_dir; returns the
    checkpoint path.  With resume=True, picks up from the saved global step.
    """
    cfg.validate()
    if not records:
        raise ConfigError("no training records")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tokenizer = tokenizer or Tokenizer.default()
    image_dir = Path(image_dir)
    pixels = {r.image_id: load_image(image_dir / f"{r.image_id}.png") for r in records}

    n = len(records)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_steps if cfg.warmup_steps is not None else max(1, int(0.1 * total_steps))
    if warmup >= total_steps:
        raise ConfigError(f"warmup_steps {warmup} must be below total steps {total_steps}")

    ckpt_path = out_dir / CHECKPOINT_NAME
    log_path = out_dir / LOSS_LOG_NAME
    if resume:
        payload = load_checkpoint(ckpt_path)
        if payload["model_config"] != model_cfg.to_dict():
            raise ConfigError("checkpoint model config does not match the requested one")
        model = restore_model(payload)
        optimizer = torch.optim.AdamW(
            model.parameters(), lr=cfg.peak_lr, weight_decay=cfg.weight_decay
        )
        optimizer.load_state_dict(payload["optimizer_state"])
        global_step = int(payload["global_step"])
        log_mode = "a"
    else:
        torch.manual_seed(cfg.seed)
        model = GrainModel(model_cfg)
        optimizer = torch.optim.AdamW(
            model.parameters(), lr=cfg.peak_lr, weight_decay=cfg.weight_decay
        )
        global_step = 0
        log_mode = "w"

    model.train()
    stop_at = min(total_steps, cfg.max_steps) if cfg.max_steps is not None else total_steps
    start_epoch = global_step // steps_per_epoch
    with open(log_path, log_mode, encoding="utf-8") as log_file:
        for epoch in range(start_epoch, cfg.epochs):
            if global_step >= stop_at:
                break
            order = _epoch_order(cfg.seed, epoch, n)
            draws = _epoch_caption_draws(cfg.seed, epoch, n)
            skip = global_step - epoch * steps_per_epoch
            for b in range(skip, steps_per_epoch):
                if global_step >= stop_at:
                    break
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                batch_records = [records[i] for i in idx]
                batch = assemble_batch(
                    batch_records,
                    [pixels[records[i].image_id] for i in idx],
                    [
                        _caption_for_draw(
                            records[i], draws[i], cfg.caption_swap_prob, cfg.use_mllm_caption
                        )
                        for i in idx
                    ],
                    tokenizer,
                )
                lr = lr_at(global_step, cfg.peak_lr, warmup, total_steps)
                breakdown = train_step(model, batch, optimizer, cfg, lr)
                global_step += 1
                if global_step % cfg.log_every == 0 or global_step == stop_at:
                    entry = {"step": global_step, **breakdown.to_dict(), "lr": lr}
                    log_file.write(json.dumps(entry, sort_keys=True) + "\n")
                    log_file.flush()
            if (epoch + 1) % cfg.checkpoint_every_epochs == 0 or global_step >= stop_at:
                save_checkpoint(ckpt_path, model, optimizer, cfg, global_step, tokenizer.identifier)
            log_event("epoch_done", epoch=epoch, step=global_step)
    save_checkpoint(ckpt_path, model, optimizer, cfg, global_step, tokenizer.identifier)
    log_event("training_done", step=global_step, digest=parameter_digest(model)[:16])
    return ckpt_path
