"""Bipartite matching of predictions to ground truth and the set prediction loss.
"""
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from rego.base import DimensionError, NonFiniteError, shape_str
from rego.boxes import BoxSet, giou_tensor, pairwise_giou
from rego.detr import DetectionSet
from rego.tensor import Tensor, log_softmax, sigmoid, softplus

logger = logging.getLogger(__name__)

LOSS_TYPES = ('ce', 'focal')


@dataclass
class GroundTruth:
    """K ground-truth boxes and their class labels for one image.
    """

    boxes: BoxSet
    labels: np.ndarray

    def __post_init__(self) -> None:
        if not isinstance(self.boxes, BoxSet):
            self.boxes = BoxSet(self.boxes)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.labels) != len(self.boxes):
            raise DimensionError(
                f'GroundTruth: {len(self.boxes)} boxes but {len(self.labels)} labels')
        if np.any(self.labels < 0):
            raise ValueError('GroundTruth: labels must be non-negative')

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class CostWeights:
    """Weights of the classification, L1 and GIoU terms, shared by matcher and loss.
    """

    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0

    def __post_init__(self) -> None:
        values = (self.cls, self.l1, self.giou)
        if any(v < 0 for v in values):
            raise ValueError(f'cost weights must be non-negative, got {values}')
        if not any(values):
            raise ValueError('cost weights must not all be zero')


@dataclass
class SetLoss:
    """Mean set loss over stages plus a per-stage breakdown of plain floats.
    """

    total: Tensor
    stages: list[dict[str, float]] = field(default_factory=list)

    def item(self) -> float:
        return self.total.item()


def class_probabilities(logits: np.ndarray, loss: str = 'ce') -> np.ndarray:
    """Foreground class probabilities, N x N_c.

    Softmax over all N_c + 1 logits for cross-entropy models, independent
    sigmoids of the first N_c logits for focal models.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if loss == 'focal':
        return 1.0 / (1.0 + np.exp(-logits[:, :-1]))
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True))[:, :-1]


def cost_matrix(pred: DetectionSet, gt: GroundTruth, weights: CostWeights,
                loss: str = 'ce') -> Tensor:
    """Matching cost C[i, j] of prediction i against ground truth j.

    C = -w_cls * p_i(c_j) + w_l1 * |b_i - b_j|_1 - w_giou * GIoU(b_i, b_j)
    """
    n = len(pred)
    if len(gt) == 0:
        return Tensor(np.zeros((n, 0)))
    if gt.labels.max() >= pred.num_classes:
        raise ValueError(f'label {gt.labels.max()} outside {pred.num_classes} classes')
    probs = class_probabilities(pred.logits.data, loss)
    boxes = pred.boxes.data
    target = gt.boxes.boxes
    cls = -probs[:, gt.labels]
    l1 = np.abs(boxes[:, None, :] - target[None, :, :]).sum(axis=-1)
    overlap = pairwise_giou(boxes, target)
    return Tensor(weights.cls * cls + weights.l1 * l1 - weights.giou * overlap)


def hungarian(cost: Tensor | np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost assignment of every column (target) to a distinct row.

    Shortest augmenting paths with dual potentials, O(K^2 N) for N rows and
    K columns. Returns (row, column) pairs sorted by row.
    """
    c = np.asarray(cost.data if isinstance(cost, Tensor) else cost, dtype=np.float64)
    if c.ndim != 2:
        raise DimensionError(f'hungarian: cost must be a matrix, got {shape_str(c.shape)}')
    n, k = c.shape
    if k == 0:
        return []
    if not np.all(np.isfinite(c)):
        raise NonFiniteError('hungarian: cost matrix has non-finite entries', op='cost_matrix')
    if n < k:
        raise ValueError(f'hungarian: {n} predictions cannot cover {k} targets')

    a = c.T
    u = np.zeros(k + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, k + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            cur = a[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    return [(j - 1, int(owner[j]) - 1) for j in range(1, n + 1) if owner[j]]


def _classification_loss(pred: DetectionSet, target: np.ndarray, num_boxes: float,
                         loss: str, eos_coef: float, focal_alpha: float,
                         focal_gamma: float) -> Tensor:
    n, nc = len(pred), pred.num_classes
    if loss == 'focal':
        onehot = np.zeros((n, nc))
        fg = target < nc
        onehot[np.flatnonzero(fg), target[fg]] = 1.0
        x = pred.logits[:, :nc]
        t = Tensor(onehot)
        p = sigmoid(x)
        ce = softplus(x) - x * t
        p_t = p * t + (1.0 - p) * (1.0 - t)
        alpha_t = Tensor(focal_alpha * onehot + (1 - focal_alpha) * (1 - onehot))
        return (alpha_t * ce * (1.0 - p_t) ** focal_gamma).sum() / num_boxes
    weight = np.ones(n)
    weight[target == nc] = eos_coef
    picked = log_softmax(pred.logits, axis=-1)[np.arange(n), target]
    return -(picked * Tensor(weight)).sum() / weight.sum()


def stage_loss(pred: DetectionSet, gt: GroundTruth, weights: CostWeights,
               loss: str = 'ce', eos_coef: float = 0.1, focal_alpha: float = 0.25,
               focal_gamma: float = 2.0) -> tuple[Tensor, dict[str, float]]:
    """Match one stage's predictions to `gt` and return its weighted loss.

    Unmatched predictions are supervised as background. Box terms are summed
    over matched pairs and divided by max(K, 1).
    """
    if loss not in LOSS_TYPES:
        raise ValueError(f'unknown loss {loss!r}, expected one of {LOSS_TYPES}')
    pairs = hungarian(cost_matrix(pred, gt, weights, loss))
    rows = np.array([r for r, _ in pairs], dtype=np.int64)
    cols = np.array([c for _, c in pairs], dtype=np.int64)
    num_boxes = float(max(len(gt), 1))
    target = np.full(len(pred), pred.num_classes, dtype=np.int64)
    target[rows] = gt.labels[cols]
    cls = _classification_loss(pred, target, num_boxes, loss, eos_coef, focal_alpha, focal_gamma)
    if pairs:
        matched = pred.boxes[rows]
        expected = gt.boxes.boxes[cols]
        l1 = (matched - Tensor(expected)).abs().sum() / num_boxes
        gi = (1.0 - giou_tensor(matched, expected)).sum() / num_boxes
    else:
        l1 = gi = Tensor(0.0)
    total = weights.cls * cls + weights.l1 * l1 + weights.giou * gi
    logger.debug(f'stage_loss: matched {len(pairs)} of {len(pred)} predictions to {len(gt)} targets')
    breakdown = {'cls': cls.item(), 'l1': l1.item(), 'giou': gi.item(),
                 'total': total.item(), 'matched': float(len(pairs))}
    return total, breakdown


def compute_set_loss(stages: Sequence[DetectionSet], gt: GroundTruth,
                     weights: CostWeights | None = None, loss: str = 'ce',
                     eos_coef: float = 0.1, focal_alpha: float = 0.25,
                     focal_gamma: float = 2.0) -> SetLoss:
    """Average the set loss over every stage, matching each stage independently.
    """
    if not stages:
        raise ValueError('compute_set_loss: no stages')
    weights = weights or CostWeights()
    totals, breakdown = [], []
    for pred in stages:
        total, parts = stage_loss(pred, gt, weights, loss, eos_coef, focal_alpha, focal_gamma)
        totals.append(total)
        breakdown.append(parts)
    out = totals[0]
    for t in totals[1:]:
        out = out + t
    return SetLoss(out / len(totals), breakdown)
