"""Axis-aligned bounding boxes in normalized image coordinates.

Canonical storage is center form (cx, cy, w, h) with coordinates in [0, 1];
corner form (x0, y0, x1, y1) is derived wherever overlap math needs it, so
there is a single conversion site. Overlap measures take torch tensors of
center-form boxes and are differentiable away from degenerate inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import torch
from torch import Tensor

_DIV_EPS = 1e-12


class BoxForm(str, Enum):
    CENTER = "center"
    CORNER = "corner"


@dataclass(frozen=True)
class Box:
    """One rectangle stored in center form.

    Zero width or height is legal (degenerate boxes score IoU 0 against
    everything); negative extents are rejected.
    """

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box has negative extent: w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "Box":
        if x1 < x0 or y1 < y0:
            raise ValueError(f"corner box has inverted extent: ({x0}, {y0}, {x1}, {y1})")
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


def convert(
    coords: Sequence[float],
    source: BoxForm | str,
    target: BoxForm | str,
) -> tuple[float, float, float, float]:
    """Convert one 4-vector between center and corner parameterizations.

    Raises ValueError if the input describes a rectangle with negative
    width or height.
    """
    source = BoxForm(source)
    target = BoxForm(target)
    if len(coords) != 4:
        raise ValueError(f"expected 4 coordinates, got {len(coords)}")
    if source == BoxForm.CENTER:
        box = Box(*coords)
    else:
        box = Box.from_corners(*coords)
    if target == BoxForm.CENTER:
        return box.as_tuple()
    return box.corners


def boxes_to_tensor(boxes: Iterable[Box], dtype: torch.dtype = torch.float64) -> Tensor:
    rows = [b.as_tuple() for b in boxes]
    if not rows:
        return torch.zeros((0, 4), dtype=dtype)
    return torch.tensor(rows, dtype=dtype)


def tensor_to_boxes(boxes: Tensor) -> list[Box]:
    return [Box(*row) for row in boxes.detach().cpu().tolist()]


def box_cxcywh_to_xyxy(boxes: Tensor) -> Tensor:
    """(..., 4) center form -> corner form."""
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack(
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1
    )


def box_xyxy_to_cxcywh(boxes: Tensor) -> Tensor:
    """(..., 4) corner form -> center form."""
    x0, y0, x1, y1 = boxes.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def _corner_areas(xyxy: Tensor) -> Tensor:
    return (xyxy[..., 2] - xyxy[..., 0]) * (xyxy[..., 3] - xyxy[..., 1])


def _iou_union(a_xyxy: Tensor, b_xyxy: Tensor) -> tuple[Tensor, Tensor]:
    lt = torch.max(a_xyxy[..., :2], b_xyxy[..., :2])
    rb = torch.min(a_xyxy[..., 2:], b_xyxy[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = _corner_areas(a_xyxy) + _corner_areas(b_xyxy) - inter
    iou = torch.where(union > 0, inter / union.clamp(min=_DIV_EPS), torch.zeros_like(union))
    return iou, union


def _giou(a_xyxy: Tensor, b_xyxy: Tensor) -> Tensor:
    iou, union = _iou_union(a_xyxy, b_xyxy)
    lt = torch.min(a_xyxy[..., :2], b_xyxy[..., :2])
    rb = torch.max(a_xyxy[..., 2:], b_xyxy[..., 2:])
    wh = (rb - lt).clamp(min=0)
    hull = wh[..., 0] * wh[..., 1]
    # Degenerate enclosing box: both terms vanish and the result is 0.
    correction = torch.where(
        hull > 0, (hull - union) / hull.clamp(min=_DIV_EPS), torch.zeros_like(hull)
    )
    return iou - correction


def elementwise_iou(a: Tensor, b: Tensor) -> Tensor:
    """IoU of paired center-form boxes, shapes (..., 4) and (..., 4)."""
    return _iou_union(box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b))[0]


def elementwise_giou(a: Tensor, b: Tensor) -> Tensor:
    """Generalized IoU of paired center-form boxes, in [-1, 1]."""
    return _giou(box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b))


def pairwise_iou(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs IoU for center-form box sets (N, 4) and (M, 4) -> (N, M)."""
    a_xyxy = box_cxcywh_to_xyxy(a).unsqueeze(-2)
    b_xyxy = box_cxcywh_to_xyxy(b).unsqueeze(-3)
    return _iou_union(a_xyxy, b_xyxy)[0]


def pairwise_giou(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs generalized IoU for center-form box sets -> (N, M)."""
    a_xyxy = box_cxcywh_to_xyxy(a).unsqueeze(-2)
    b_xyxy = box_cxcywh_to_xyxy(b).unsqueeze(-3)
    return _giou(a_xyxy, b_xyxy)


def iou(a: Box, b: Box) -> float:
    """Scalar IoU; 0 by convention when the union has zero area."""
    ta = boxes_to_tensor([a])
    tb = boxes_to_tensor([b])
    return float(pairwise_iou(ta, tb)[0, 0])


def giou(a: Box, b: Box) -> float:
    """Scalar generalized IoU; 0 when the enclosing box is degenerate."""
    ta = boxes_to_tensor([a])
    tb = boxes_to_tensor([b])
    return float(pairwise_giou(ta, tb)[0, 0])
