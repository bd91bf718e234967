"""COCO-style average precision and IoU histograms of correct detections.

AP uses 101-point interpolated precision, greedy score-ordered matching per
class and image, IoU thresholds 0.50:0.05:0.95, and S/M/L area ranges cut at
the tertiles of the ground-truth box areas.
"""
import json
import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass

import numpy as np
from rego.base import DimensionError
from rego.boxes import pairwise_iou
from rego.detr import DetectionSet
from rego.matching import GroundTruth, class_probabilities

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
CSV_FIELDS = ('stage', 'AP', 'AP50', 'AP75', 'AP_S', 'AP_M', 'AP_L')


@dataclass
class EvalReport:
    AP: float = 0.0
    AP50: float = 0.0
    AP75: float = 0.0
    AP_S: float = 0.0
    AP_M: float = 0.0
    AP_L: float = 0.0
    stage: int | None = None

    def as_dict(self) -> dict[str, float | int | None]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict())

    def csv_row(self) -> list[str]:
        return [str(getattr(self, f)) if getattr(self, f) is not None else '' for f in CSV_FIELDS]


@dataclass
class Predictions:
    """Scored, labeled boxes for one image; what the evaluator consumes.
    """

    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if not len(self.boxes) == len(self.scores) == len(self.labels):
            raise DimensionError(
                f'Predictions: {len(self.boxes)} boxes, {len(self.scores)} scores, '
                f'{len(self.labels)} labels')

    @classmethod
    def from_detections(cls, det: DetectionSet, loss: str = 'ce') -> 'Predictions':
        """Best foreground class and its probability for every query.
        """
        probs = class_probabilities(det.logits.data, loss)
        labels = probs.argmax(axis=1)
        return cls(det.boxes.data, probs[np.arange(len(labels)), labels], labels)


def _as_predictions(preds: Sequence[DetectionSet | Predictions], loss: str) -> list[Predictions]:
    return [p if isinstance(p, Predictions) else Predictions.from_detections(p, loss) for p in preds]


def _area_ranges(gts: Sequence[GroundTruth]) -> dict[str, tuple[float, float]]:
    areas = np.concatenate([g.boxes.area() for g in gts]) if gts else np.zeros(0)
    lo, hi = np.quantile(areas, [1 / 3, 2 / 3]) if len(areas) else (0.0, 0.0)
    return {'all': (0.0, np.inf), 'S': (0.0, lo), 'M': (lo, hi), 'L': (hi, np.inf)}


def _in_range(area: np.ndarray, bounds: tuple[float, float]) -> np.ndarray:
    lo, hi = bounds
    return (area >= lo) & ((area < hi) | np.isinf(hi))


def _average_precision(preds: list[Predictions], gts: Sequence[GroundTruth], label: int,
                       threshold: float, bounds: tuple[float, float]) -> float:
    """AP of one class at one IoU threshold and area range; -1 when no GT counts.
    """
    scores, hits, ignored = [], [], []
    counted = 0
    for pred, gt in zip(preds, gts):
        g = gt.boxes.boxes[gt.labels == label]
        g_ignore = ~_in_range(g[:, 2] * g[:, 3], bounds)
        order_g = np.argsort(g_ignore, kind='stable')
        g, g_ignore = g[order_g], g_ignore[order_g]
        counted += int((~g_ignore).sum())
        keep = pred.labels == label
        d = pred.boxes[keep]
        s = pred.scores[keep]
        order = np.argsort(-s, kind='stable')
        d, s = d[order], s[order]
        overlaps = pairwise_iou(d, g)[0] if len(d) and len(g) else np.zeros((len(d), len(g)))
        taken = np.zeros(len(g), dtype=bool)
        for i in range(len(d)):
            best, match = min(threshold, 1 - 1e-10), -1
            for j in range(len(g)):
                if taken[j]:
                    continue
                if match > -1 and not g_ignore[match] and g_ignore[j]:
                    break
                if overlaps[i, j] < best:
                    continue
                best, match = overlaps[i, j], j
            if match > -1:
                taken[match] = True
                hits.append(True)
                ignored.append(bool(g_ignore[match]))
            else:
                hits.append(False)
                ignored.append(not _in_range(np.array([d[i, 2] * d[i, 3]]), bounds)[0])
            scores.append(s[i])
    if counted == 0:
        return -1.0
    if not scores:
        return 0.0
    order = np.argsort(-np.array(scores), kind='mergesort')
    hits = np.array(hits)[order]
    ignored = np.array(ignored)[order]
    tp = np.cumsum(hits & ~ignored)
    fp = np.cumsum(~hits & ~ignored)
    recall = tp / counted
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side='left')
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def _mean_valid(values: list[float]) -> float:
    valid = [v for v in values if v >= 0]
    return float(np.mean(valid)) if valid else 0.0


def evaluate_ap(preds: Sequence[DetectionSet | Predictions], gts: Sequence[GroundTruth],
                loss: str = 'ce', stage: int | None = None) -> EvalReport:
    """Average precision over classes present in the ground truth.

    Classes without any ground-truth box are left out of every mean; an area
    range holding no ground truth reports 0.
    """
    if len(preds) != len(gts):
        raise ValueError(f'evaluate_ap: {len(preds)} prediction sets for {len(gts)} images')
    preds = _as_predictions(preds, loss)
    labels = sorted({int(c) for g in gts for c in g.labels})
    ranges = _area_ranges(gts)

    def ap_at(thresholds: Sequence[float], area: str) -> float:
        return _mean_valid([_average_precision(preds, gts, c, t, ranges[area])
                            for c in labels for t in thresholds])

    report = EvalReport(
        AP=ap_at(IOU_THRESHOLDS, 'all'),
        AP50=ap_at([0.5], 'all'),
        AP75=ap_at([0.75], 'all'),
        AP_S=ap_at(IOU_THRESHOLDS, 'S'),
        AP_M=ap_at(IOU_THRESHOLDS, 'M'),
        AP_L=ap_at(IOU_THRESHOLDS, 'L'),
        stage=stage,
        )
    logger.debug(f'evaluate_ap stage={stage}: {report}')
    return report


def _check_bins(bins: Sequence[float]) -> np.ndarray:
    edges = np.asarray(bins, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2:
        raise ValueError(f'histogram needs at least two bin edges, got {list(bins)}')
    if np.any(np.diff(edges) <= 0):
        raise ValueError(f'histogram bin edges must strictly increase, got {list(bins)}')
    if edges[0] < 0.5 or edges[-1] > 1.0:
        raise ValueError(f'histogram bin edges must lie in [0.5, 1.0], got {list(bins)}')
    return edges


def correct_detections(pred: Predictions, gt: GroundTruth, min_score: float = 0.0) -> np.ndarray:
    """IoUs of correct detections in one image.

    A detection is correct when its label matches and its IoU exceeds 0.5;
    pairs are claimed greedily by descending IoU, one-to-one.
    """
    keep = pred.scores >= min_score
    boxes, labels = pred.boxes[keep], pred.labels[keep]
    if not len(boxes) or not len(gt):
        return np.zeros(0)
    overlaps = pairwise_iou(boxes, gt.boxes.boxes)[0]
    overlaps = np.where(labels[:, None] == gt.labels[None, :], overlaps, 0.0)
    rows, cols = np.nonzero(overlaps > 0.5)
    order = np.argsort(-overlaps[rows, cols], kind='stable')
    used_p, used_g, out = set(), set(), []
    for k in order:
        i, j = rows[k], cols[k]
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        out.append(overlaps[i, j])
    return np.array(out)


def iou_histogram(stage_preds: Sequence[Sequence[DetectionSet | Predictions]],
                  gts: Sequence[GroundTruth], bins: Sequence[float],
                  loss: str = 'ce', min_score: float = 0.0) -> list[list[int]]:
    """Per stage, counts of correct detections per IoU bin.

    Bins are half-open [lo, hi) except the last, which includes its upper edge.
    """
    edges = _check_bins(bins)
    counts = []
    for preds in stage_preds:
        if len(preds) != len(gts):
            raise ValueError(f'iou_histogram: {len(preds)} prediction sets for {len(gts)} images')
        ious = [correct_detections(p, g, min_score)
                for p, g in zip(_as_predictions(preds, loss), gts)]
        values = np.concatenate(ious) if ious else np.zeros(0)
        values = values[(values >= edges[0]) & (values <= edges[-1])]
        hist = np.zeros(len(edges) - 1, dtype=np.int64)
        idx = np.minimum(np.searchsorted(edges, values, side='right') - 1, len(hist) - 1)
        np.add.at(hist, idx, 1)
        counts.append([int(c) for c in hist])
    return counts
