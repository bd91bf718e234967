"""Normalized (cx, cy, w, h) boxes: conversions, IoU and generalized IoU.
"""
import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from rego.base import DimensionError, shape_str
from rego.tensor import Tensor, clip, maximum, minimum

logger = logging.getLogger(__name__)


@dataclass
class BoxSet:
    """N boxes in normalized (cx, cy, w, h) coordinates.
    """

    boxes: np.ndarray

    def __post_init__(self) -> None:
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)

    def __len__(self) -> int:
        return len(self.boxes)

    @classmethod
    def from_xyxy(cls, corners: np.ndarray) -> 'BoxSet':
        return cls(xyxy_to_cxcywh(np.asarray(corners, dtype=np.float64)))

    def xyxy(self) -> np.ndarray:
        return cxcywh_to_xyxy(self.boxes)

    def area(self) -> np.ndarray:
        return self.boxes[:, 2] * self.boxes[:, 3]

    def validate(self, tol: float = 1e-9) -> None:
        """Raise ValueError unless every box has positive extent inside the unit square.
        """
        if not np.all(np.isfinite(self.boxes)):
            raise ValueError('boxes contain non-finite coordinates')
        if np.any(self.boxes[:, 2:] <= 0):
            raise ValueError('boxes must have positive width and height')
        corners = self.xyxy()
        if np.any(corners < -tol) or np.any(corners > 1 + tol):
            raise ValueError('boxes extend outside the unit square')


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def _checked(box: Sequence[float]) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64)
    if b.shape != (4,):
        raise DimensionError(f'box must have 4 coordinates, got {shape_str(b.shape)}')
    if b[2] <= 0 or b[3] <= 0:
        raise ValueError(f'degenerate box {b.tolist()}: width and height must be positive')
    return b


def _overlap(a: np.ndarray, b: np.ndarray) -> tuple[float, float, float]:
    ax0, ay0, ax1, ay1 = cxcywh_to_xyxy(a)
    bx0, by0, bx1, by1 = cxcywh_to_xyxy(b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    enclose = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter, union, enclose


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two (cx, cy, w, h) boxes; 0 when disjoint.
    """
    inter, union, _ = _overlap(_checked(a), _checked(b))
    return inter / union


def giou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU minus the fraction of the enclosing box not covered by the union.
    """
    inter, union, enclose = _overlap(_checked(a), _checked(b))
    return inter / union - (enclose - union) / enclose


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """IoU and union area for every pair of rows of two (cx, cy, w, h) arrays.
    """
    ca, cb = cxcywh_to_xyxy(np.asarray(a).reshape(-1, 4)), cxcywh_to_xyxy(np.asarray(b).reshape(-1, 4))
    lo = np.maximum(ca[:, None, :2], cb[None, :, :2])
    hi = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    wh = np.clip(hi - lo, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union, union


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ca, cb = cxcywh_to_xyxy(np.asarray(a).reshape(-1, 4)), cxcywh_to_xyxy(np.asarray(b).reshape(-1, 4))
    overlap, union = pairwise_iou(a, b)
    lo = np.minimum(ca[:, None, :2], cb[None, :, :2])
    hi = np.maximum(ca[:, None, 2:], cb[None, :, 2:])
    wh = np.clip(hi - lo, 0, None)
    enclose = wh[..., 0] * wh[..., 1]
    return overlap - (enclose - union) / enclose


def giou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Row-wise differentiable GIoU between K predicted and K target boxes.
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 4:
        raise DimensionError(
            f'giou_tensor: pred {shape_str(pred.shape)} vs target {shape_str(target.shape)}')
    cx, cy, w, h = (pred[:, i] for i in range(4))
    px0, py0, px1, py1 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
    t = cxcywh_to_xyxy(target)
    tx0, ty0, tx1, ty1 = (Tensor(t[:, i]) for i in range(4))
    iw = clip(minimum(px1, tx1) - maximum(px0, tx0), 0.0)
    ih = clip(minimum(py1, ty1) - maximum(py0, ty0), 0.0)
    inter = iw * ih
    union = w * h + Tensor(target[:, 2] * target[:, 3]) - inter
    ew = maximum(px1, tx1) - minimum(px0, tx0)
    eh = maximum(py1, ty1) - minimum(py0, ty0)
    enclose = ew * eh
    return inter / union - (enclose - union) / enclose

