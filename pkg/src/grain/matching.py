"""Bipartite matching of ground-truth regions to predicted queries.

The cost couples an L1 term with a (1 - generalized IoU) term, equally
weighted by default (DETR's 5/2 weighting is available through the weight
arguments).  Matching is computed on boxes only; no similarity term enters
the cost.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .boxes import NormBox, pairwise_giou, pairwise_l1
from .errors import ShapeError


@dataclass(frozen=True)
class Assignment:
    """Injective map of gt regions onto predicted queries, plus its cost."""

    pairs: tuple[tuple[int, int], ...]  # (gt_index, query_index), gt ascending
    total_cost: float

    def __len__(self) -> int:
        return len(self.pairs)

    def query_for_gt(self) -> dict[int, int]:
        return {g: q for g, q in self.pairs}


def _as_box_tensor(boxes) -> torch.Tensor:
    if isinstance(boxes, torch.Tensor):
        return boxes.detach().to(torch.float64)
    rows = [b.as_tuple() if isinstance(b, NormBox) else tuple(b) for b in boxes]
    return torch.tensor(rows, dtype=torch.float64).reshape(-1, 4)


def build_cost_matrix(
    gt_boxes,
    pred_boxes,
    l1_weight: float = 1.0,
    giou_weight: float = 1.0,
) -> np.ndarray:
    """cost[i][j] = l1_weight * L1(gt_i, pred_j) + giou_weight * (1 - GIoU(gt_i, pred_j)).

    Accepts (m, 4)/(n, 4) cxcywh tensors or sequences of NormBox.
    """
    gt = _as_box_tensor(gt_boxes)
    pred = _as_box_tensor(pred_boxes)
    if gt.shape[0] > pred.shape[0]:
        raise ShapeError(
            f"more ground-truth regions ({gt.shape[0]}) than queries ({pred.shape[0]})"
        )
    if gt.shape[0] == 0:
        return np.zeros((0, pred.shape[0]), dtype=np.float64)
    cost = l1_weight * pairwise_l1(gt, pred) + giou_weight * (1.0 - pairwise_giou(gt, pred))
    cost = cost.numpy()
    assert np.isfinite(cost).all()
    assert (cost >= -1e-9).all(), "matching cost must be nonnegative"
    return cost


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-total-cost injective assignment of rows to columns."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"cost matrix must be 2-D, got shape {cost.shape}")
    m, n = cost.shape
    if m > n:
        raise ShapeError(f"cost matrix has more rows ({m}) than columns ({n})")
    if m == 0:
        return Assignment(pairs=(), total_cost=0.0)
    if not np.isfinite(cost).all():
        raise ShapeError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple(sorted(zip(rows.tolist(), cols.tolist())))
    total = float(cost[rows, cols].sum())
    return Assignment(pairs=pairs, total_cost=total)


def match_boxes(
    gt_boxes,
    pred_boxes,
    l1_weight: float = 1.0,
    giou_weight: float = 1.0,
) -> Assignment:
    """Convenience wrapper: build the cost matrix and solve it."""
    cost = build_cost_matrix(gt_boxes, pred_boxes, l1_weight, giou_weight)
    return hungarian(cost)


def match_batch(
    gt_boxes_per_image: Sequence[torch.Tensor],
    pred_boxes: torch.Tensor,
    l1_weight: float = 1.0,
    giou_weight: float = 1.0,
) -> list[Assignment]:
    """Per-image matching of (m_i, 4) gt tensors against (B, n_q, 4) predictions."""
    if len(gt_boxes_per_image) != pred_boxes.shape[0]:
        raise ShapeError(
            f"{len(gt_boxes_per_image)} gt lists vs batch of {pred_boxes.shape[0]}"
        )
    return [
        match_boxes(gt, pred_boxes[i], l1_weight, giou_weight)
        for i, gt in enumerate(gt_boxes_per_image)
    ]
