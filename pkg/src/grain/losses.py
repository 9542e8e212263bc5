"""Training objectives: global image-caption alignment, matched-pair box
regression, and region-description alignment.

All three are summed with equal weight.  The two contrastive terms share one
learnable logit scale and average the cross-entropy of both softmax
directions.  The box term averages (1 - GIoU) + L1 over matched pairs pooled
across the whole batch, so images with many regions weigh proportionally and
images with none contribute nothing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .boxes import pairwise_giou, pairwise_iou, pairwise_l1
from .errors import ShapeError
from .matching import Assignment


@dataclass(frozen=True)
class LossBreakdown:
    l_ic: float
    l_box: float
    l_rd: float

    @property
    def l_total(self) -> float:
        return self.l_ic + self.l_box + self.l_rd

    def to_dict(self) -> dict:
        return {
            "l_ic": self.l_ic,
            "l_box": self.l_box,
            "l_rd": self.l_rd,
            "l_total": self.l_total,
        }


def total_loss(l_ic: float, l_box: float, l_rd: float) -> float:
    """Equal-weight sum of the three parts."""
    return LossBreakdown(l_ic, l_box, l_rd).l_total


def _symmetric_infonce(
    left: torch.Tensor, right: torch.Tensor, logit_scale: torch.Tensor
) -> torch.Tensor:
    """Mean of both cross-entropy directions over scaled cosine logits.

    Rows of `left` and `right` are unit embeddings of matching pairs; every
    other row in the batch is a negative.
    """
    if left.shape != right.shape:
        raise ShapeError(f"embedding shapes differ: {tuple(left.shape)} vs {tuple(right.shape)}")
    n = left.shape[0]
    if n == 0:
        return left.new_zeros(())
    logits = logit_scale * left @ right.t()
    targets = torch.arange(n, device=left.device)
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.t(), targets))


def image_caption_loss(
    image_embeds: torch.Tensor, caption_embeds: torch.Tensor, logit_scale: torch.Tensor
) -> torch.Tensor:
    """Symmetric contrastive loss over the (image, caption) batch."""
    return _symmetric_infonce(image_embeds, caption_embeds, logit_scale)


def box_pair_losses(
    gt_boxes: torch.Tensor,
    pred_boxes: torch.Tensor,
    assignment: Assignment,
    use_giou: bool = True,
) -> torch.Tensor:
    """Per-matched-pair (1 - [G]IoU) + L1, shape (len(assignment),)."""
    if not assignment.pairs:
        return pred_boxes.new_zeros((0,))
    gt_idx = [g for g, _ in assignment.pairs]
    q_idx = [q for _, q in assignment.pairs]
    gt = gt_boxes[gt_idx]
    pred = pred_boxes[q_idx]
    overlap = pairwise_giou(gt, pred) if use_giou else pairwise_iou(gt, pred)
    per_pair = (1.0 - overlap.diagonal()) + pairwise_l1(gt, pred).diagonal()
    return per_pair


def box_loss(
    gt_boxes: torch.Tensor,
    pred_boxes: torch.Tensor,
    assignment: Assignment,
    use_giou: bool = True,
) -> torch.Tensor:
    """Mean pair loss for one image; zero when it has no ground truth."""
    per_pair = box_pair_losses(gt_boxes, pred_boxes, assignment, use_giou)
    if per_pair.shape[0] == 0:
        return pred_boxes.new_zeros(())
    return per_pair.mean()


def batch_box_loss(
    gt_boxes_per_image: Sequence[torch.Tensor],
    pred_boxes: torch.Tensor,
    assignments: Sequence[Assignment],
    use_giou: bool = True,
) -> torch.Tensor:
    """Mean over all matched pairs pooled across the batch."""
    if len(gt_boxes_per_image) != len(assignments):
        raise ShapeError("one assignment per image required")
    parts = [
        box_pair_losses(gt, pred_boxes[i], assignments[i], use_giou)
        for i, gt in enumerate(gt_boxes_per_image)
    ]
    pooled = torch.cat(parts) if parts else pred_boxes.new_zeros((0,))
    if pooled.shape[0] == 0:
        return pred_boxes.new_zeros(())
    return pooled.mean()


def gather_matched_pairs(
    region_embeds: torch.Tensor,
    description_embeds: Sequence[torch.Tensor],
    assignments: Sequence[Assignment],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Matched (region, description) embedding rows pooled across the batch.

    `region_embeds` is (B, n_q, E); `description_embeds[i]` holds image i's
    description embeddings indexed like its gt boxes.
    """
    if region_embeds.shape[0] != len(assignments) or len(description_embeds) != len(assignments):
        raise ShapeError("need one description set and one assignment per image")
    regions, descs = [], []
    for i, assignment in enumerate(assignments):
        for gt_idx, q_idx in assignment.pairs:
            regions.append(region_embeds[i, q_idx])
            descs.append(description_embeds[i][gt_idx])
    if not regions:
        empty = region_embeds.new_zeros((0, region_embeds.shape[-1]))
        return empty, empty
    return torch.stack(regions), torch.stack(descs)


def region_description_loss(
    region_embeds: torch.Tensor,
    description_embeds: Sequence[torch.Tensor],
    assignments: Sequence[Assignment],
    logit_scale: torch.Tensor,
) -> torch.Tensor:
    """Symmetric contrastive loss over matched region-description pairs, with
    every other matched pair in the batch as negatives."""
    regions, descs = gather_matched_pairs(region_embeds, description_embeds, assignments)
    return _symmetric_infonce(regions, descs, logit_scale)
