"""
Normalized box and point algebra.

Boxes live in ccwh form (cx, cy, w, h) with every value a fraction of the
image size; corner form is only computed when IoU math needs it. The scalar
helpers work on the NamedTuples below, the `*_t` helpers on torch tensors
with a trailing dimension of 4.
"""
import math
from typing import NamedTuple

import torch
from torch import Tensor

from .utils import GeometryError

MIN_SIZE = 1e-4


class Point2(NamedTuple):
    x: float
    y: float


class BoxCCWH(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float


class BoxXYXY(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float


def check_box(b):
    if not all(math.isfinite(v) for v in b):
        raise GeometryError(f"non-finite box {tuple(b)}")
    if b.w <= 0 or b.h <= 0:
        raise GeometryError(f"degenerate box {tuple(b)}")
    return b


def check_corners(b):
    if not all(math.isfinite(v) for v in b):
        raise GeometryError(f"non-finite box {tuple(b)}")
    if not (b.x1 < b.x2 and b.y1 < b.y2):
        raise GeometryError(f"degenerate corner box {tuple(b)}")
    return b


def clamp_box(b, min_size=MIN_SIZE):
    """Clip the corners to [0,1]^2 and floor w, h at `min_size`."""
    x1 = min(max(b.cx - b.w / 2, 0.0), 1.0)
    y1 = min(max(b.cy - b.h / 2, 0.0), 1.0)
    x2 = min(max(b.cx + b.w / 2, 0.0), 1.0)
    y2 = min(max(b.cy + b.h / 2, 0.0), 1.0)
    w = max(x2 - x1, min_size)
    h = max(y2 - y1, min_size)
    cx = min(max((x1 + x2) / 2, w / 2), 1.0 - w / 2)
    cy = min(max((y1 + y2) / 2, h / 2), 1.0 - h / 2)
    return BoxCCWH(cx, cy, w, h)


def to_corners(b):
    check_box(b)
    return BoxXYXY(b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2)


def from_corners(b):
    check_corners(b)
    return BoxCCWH((b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2, b.x2 - b.x1, b.y2 - b.y1)


def area(b):
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def _inter_union_hull(a, b):
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = area(a) + area(b) - inter
    hull = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    return inter, union, hull


def iou(a, b):
    check_corners(a)
    check_corners(b)
    if a == b:
        return 1.0
    inter, union, _ = _inter_union_hull(a, b)
    return inter / union


def giou(a, b):
    check_corners(a)
    check_corners(b)
    if a == b:
        return 1.0
    inter, union, hull = _inter_union_hull(a, b)
    return inter / union - (hull - union) / hull


def hflip_point(p):
    return Point2(1.0 - p.x, p.y)


def hflip_box(b):
    return BoxCCWH(1.0 - b.cx, b.cy, b.w, b.h)


def l1_box(a, b):
    return sum(abs(u - v) for u, v in zip(a, b))


# --- tensor versions (used by the differentiable objectives) ---

def clamp_boxes_t(boxes: Tensor, min_size: float = MIN_SIZE) -> Tensor:
    cxcy, wh = boxes[..., :2], boxes[..., 2:]
    return torch.cat([cxcy, wh.clamp(min=min_size)], dim=-1)


def box_cxcywh_to_xyxy(x: Tensor) -> Tensor:
    cx, cy, w, h = x.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def giou_pairwise_t(a: Tensor, b: Tensor) -> Tensor:
    """
    Elementwise GIoU of two aligned [..., 4] corner-form tensors.
    Widths and heights must already be positive (see `clamp_boxes_t`).
    """
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    lt = torch.max(a[..., :2], b[..., :2])
    rb = torch.min(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    iou_ = inter / union

    lt_h = torch.min(a[..., :2], b[..., :2])
    rb_h = torch.max(a[..., 2:], b[..., 2:])
    wh_h = rb_h - lt_h
    hull = wh_h[..., 0] * wh_h[..., 1]
    return iou_ - (hull - union) / hull


def hflip_boxes_t(boxes: Tensor) -> Tensor:
    return torch.cat([1.0 - boxes[..., :1], boxes[..., 1:]], dim=-1)
