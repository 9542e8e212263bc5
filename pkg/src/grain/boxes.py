"""Box arithmetic in normalized center-x/center-y/width/height coordinates.

Scalar helpers operate on :class:`NormBox`; the ``pairwise_*`` functions are
the batched torch counterparts used by the matcher and the box loss (they
stay differentiable).  Corners derived from a box may stick out of the unit
square; areas are always computed on corners clipped to [0, 1], and a box
whose clipped area vanishes counts as area 0 with IoU 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class NormBox:
    """A box as fractions of the image extent."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"center out of range: ({self.cx}, {self.cy})")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"size out of range: ({self.w}, {self.h})")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


def to_corners(b: NormBox) -> tuple[float, float, float, float]:
    """(x0, y0, x1, y1) corners; not clipped, so they may leave [0, 1]."""
    return (b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2)


def from_corners(x0: float, y0: float, x1: float, y1: float) -> NormBox:
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"corners not ordered: ({x0}, {y0}, {x1}, {y1})")
    return NormBox((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def _clipped_corners(b: NormBox) -> tuple[float, float, float, float]:
    x0, y0, x1, y1 = to_corners(b)
    clip = lambda v: min(max(v, 0.0), 1.0)
    return clip(x0), clip(y0), clip(x1), clip(y1)


def _intersection_union(a: NormBox, b: NormBox) -> tuple[float, float, float]:
    ax0, ay0, ax1, ay1 = _clipped_corners(a)
    bx0, by0, bx1, by1 = _clipped_corners(b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    union = area_a + area_b - inter
    enclose = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter, union, enclose


def iou(a: NormBox, b: NormBox) -> float:
    """Intersection over union; 0 when disjoint or both areas vanish."""
    inter, union, _ = _intersection_union(a, b)
    if union <= 0.0:
        return 0.0
    return inter / union


def generalized_iou(a: NormBox, b: NormBox) -> float:
    """IoU minus the dead fraction of the smallest enclosing box; in (-1, 1]."""
    inter, union, enclose = _intersection_union(a, b)
    if union <= 0.0:
        return 0.0
    base = inter / union
    if enclose <= 0.0:
        return base
    return base - (enclose - union) / enclose


def l1_distance(a: NormBox, b: NormBox) -> float:
    """Sum of absolute coordinate differences over (cx, cy, w, h)."""
    return (
        abs(a.cx - b.cx) + abs(a.cy - b.cy) + abs(a.w - b.w) + abs(a.h - b.h)
    )


# --- batched torch path (differentiable) ---


def cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = boxes.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def _pairwise_parts(a: torch.Tensor, b: torch.Tensor):
    """inter/union/enclose areas for every (row of a, row of b) pair."""
    ac = cxcywh_to_xyxy(a).clamp(0.0, 1.0)
    bc = cxcywh_to_xyxy(b).clamp(0.0, 1.0)
    area_a = (ac[:, 2] - ac[:, 0]) * (ac[:, 3] - ac[:, 1])
    area_b = (bc[:, 2] - bc[:, 0]) * (bc[:, 3] - bc[:, 1])
    lt = torch.max(ac[:, None, :2], bc[None, :, :2])
    rb = torch.min(ac[:, None, 2:], bc[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    lt_e = torch.min(ac[:, None, :2], bc[None, :, :2])
    rb_e = torch.max(ac[:, None, 2:], bc[None, :, 2:])
    wh_e = rb_e - lt_e
    enclose = wh_e[..., 0] * wh_e[..., 1]
    return inter, union, enclose


def pairwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(m, n) IoU matrix for cxcywh box tensors of shape (m, 4) and (n, 4)."""
    inter, union, _ = _pairwise_parts(a, b)
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(union))


def pairwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    inter, union, enclose = _pairwise_parts(a, b)
    iou_mat = torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(union))
    dead = torch.where(
        enclose > 0,
        (enclose - union) / enclose.clamp(min=1e-12),
        torch.zeros_like(enclose),
    )
    return iou_mat - dead


def pairwise_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.cdist(a, b, p=1)
