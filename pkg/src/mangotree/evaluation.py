"""Precision, recall, F1 and accuracy at pixel and tree level."""
import csv
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int = None  # None for tree-level counts

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, 0 if self.tn is None else self.tn) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total(self):
        return None if self.tn is None else self.tp + self.fp + self.fn + self.tn

    @property
    def correct(self):
        return None if self.tn is None else self.tp + self.tn

    def __add__(self, other):
        tn = None if self.tn is None or other.tn is None else self.tn + other.tn
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, tn)


@dataclass(frozen=True)
class MetricRow:
    precision: float
    recall: float
    f1: float
    accuracy: float = None


def _ratio(num, den):
    return num / den if den else 0.0


def metrics(c):
    """MetricRow of a ConfusionCounts; an empty denominator gives 0."""
    p = _ratio(c.tp, c.tp + c.fp)
    r = _ratio(c.tp, c.tp + c.fn)
    f1 = _ratio(2 * p * r, p + r)
    acc = None if c.tn is None else _ratio(c.correct, c.total)
    return MetricRow(p, r, f1, acc)


def pixel_counts(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    p, t = pred == 1, truth == 1
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def pixel_metrics(pred, truth):
    """Mango (1) is the positive class."""
    c = pixel_counts(pred, truth)
    return c, metrics(c)


def box_iou(a, b):
    """IoU of inclusive-coordinate boxes (xmin, ymin, xmax, ymax)."""
    iw = min(a[2], b[2]) - max(a[0], b[0]) + 1
    ih = min(a[3], b[3]) - max(a[1], b[1]) + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (a[2] - a[0] + 1) * (a[3] - a[1] + 1)
    area_b = (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / (area_a + area_b - inter)


def match_detections(pred, truth, iou_min=0.5):
    """Greedy one-to-one matching by descending IoU.

    ``pred`` is a list of boxes or anything with a ``boxes`` attribute.
    Returns tree-level ConfusionCounts (no true negatives).
    """
    pred = list(getattr(pred, "boxes", pred))
    truth = list(truth)
    cand = []
    for i, p in enumerate(pred):
        for j, t in enumerate(truth):
            iou = box_iou(p, t)
            if iou >= iou_min and iou > 0:
                cand.append((-iou, i, j))
    cand.sort()
    used_p, used_t = set(), set()
    for _, i, j in cand:
        if i not in used_p and j not in used_t:
            used_p.add(i)
            used_t.add(j)
    tp = len(used_p)
    return ConfusionCounts(tp, len(pred) - tp, len(truth) - tp)


def aggregate(counts):
    """Micro-average: sum the counts over images, then compute the metrics."""
    counts = list(counts)
    if not counts:
        raise ValueError("aggregate needs at least one image")
    total = counts[0]
    for c in counts[1:]:
        total = total + c
    return metrics(total)


def write_metrics(path, rows):
    """rows: iterable of (image_id, MetricRow); tree-level rows leave accuracy blank."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["image_id", "precision", "recall", "f1", "accuracy"])
        for image_id, m in rows:
            acc = "" if m.accuracy is None else f"{m.accuracy:.4f}"
            out.writerow([image_id, f"{m.precision:.4f}", f"{m.recall:.4f}", f"{m.f1:.4f}", acc])
