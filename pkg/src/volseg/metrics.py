"""Voxel confusion counts and overlap metrics (Dice, sensitivity, PPV, IoU)."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .volume import Mask

__all__ = [
    "ConfusionCounts",
    "MetricsReport",
    "confusion_counts",
    "metrics_from_counts",
    "report_volume",
    "aggregate",
]

METRIC_NAMES = ("dsc", "sensitivity", "ppv", "iou")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError(f"counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class MetricsReport:
    id: str
    counts: ConfusionCounts
    dsc: float
    sensitivity: float
    ppv: float
    iou: float

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "counts": asdict(self.counts),
            "dsc": self.dsc,
            "sensitivity": self.sensitivity,
            "ppv": self.ppv,
            "iou": self.iou,
        }


def _as_bool(m) -> np.ndarray:
    return np.asarray(m.data if isinstance(m, Mask) else m).astype(bool)


def confusion_counts(pred: Mask | np.ndarray, gt: Mask | np.ndarray) -> ConfusionCounts:
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction dims {p.shape} differ from ground truth dims {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int) -> float:
    # 0/0 means both sets are empty for this metric: perfect agreement
    return 1.0 if den == 0 else num / den


def metrics_from_counts(c: ConfusionCounts) -> tuple[float, float, float, float]:
    """``(dsc, sensitivity, ppv, iou)``; a zero denominator yields 1.0."""
    dsc = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    sensitivity = _ratio(c.tp, c.tp + c.fn)
    ppv = _ratio(c.tp, c.tp + c.fp)
    iou = _ratio(c.tp, c.fp + c.tp + c.fn)
    return dsc, sensitivity, ppv, iou


def report_volume(pred: Mask | np.ndarray, gt: Mask | np.ndarray, id: str = "") -> MetricsReport:
    counts = confusion_counts(pred, gt)
    return MetricsReport(str(id), counts, *metrics_from_counts(counts))


def aggregate(reports: Sequence[MetricsReport], micro: bool = False) -> dict:
    """Mean of each metric over volumes.

    ``micro=True`` pools the confusion counts first instead of averaging the
    per-volume values.
    """
    if not reports:
        raise ValueError("aggregate needs at least one report")
    if micro:
        pooled = reports[0].counts
        for r in reports[1:]:
            pooled = pooled + r.counts
        mean = dict(zip(METRIC_NAMES, metrics_from_counts(pooled)))
    else:
        mean = {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_NAMES}
    return {"n": len(reports), "pooling": "micro" if micro else "macro", "mean": mean,
            "reports": [r.to_dict() for r in reports]}
