"""Interval arithmetic, localization losses and grounding metrics.

Intervals live on normalized video time ``[0, 1]``. Predictions are
index-aligned with the sentences of a paragraph, so nothing here does any
matching between prediction and target sets.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence


@dataclass(frozen=True)
class Interval:
    start: float
    end: float

    def __post_init__(self):
        if not (0.0 <= self.start <= self.end <= 1.0):
            raise ValueError(f"invalid interval [{self.start}, {self.end}]: need 0 <= start <= end <= 1")

    @property
    def length(self) -> float:
        return self.end - self.start

    def as_tuple(self) -> tuple[float, float]:
        return (self.start, self.end)


IntervalSet = list  # list[Interval], one per query sentence


def as_interval(x) -> Interval:
    if isinstance(x, Interval):
        return x
    s, e = x
    return Interval(float(s), float(e))


def as_interval_set(xs: Iterable) -> list[Interval]:
    return [as_interval(x) for x in xs]


def iou(a, b) -> float:
    """Temporal IoU. A zero-length union yields 0."""
    a, b = as_interval(a), as_interval(b)
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a, b) -> float:
    """Generalized IoU in [-1, 1]; falls back to plain IoU if the hull is a point."""
    a, b = as_interval(a), as_interval(b)
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - inter
    hull = max(a.end, b.end) - min(a.start, b.start)
    plain = inter / union if union > 0.0 else 0.0
    if hull <= 0.0:
        return plain
    return plain - (hull - union) / hull


def location_loss(pred: Sequence, target: Sequence) -> float:
    """Mean over sentences of ``|ds| + |de| + (1 - giou)``."""
    pred, target = as_interval_set(pred), as_interval_set(target)
    if len(pred) != len(target):
        raise ValueError(f"misaligned prediction/target: {len(pred)} predictions for {len(target)} targets")
    if not pred:
        raise ValueError("location_loss needs at least one sentence")
    total = 0.0
    for p, t in zip(pred, target):
        total += abs(p.start - t.start) + abs(p.end - t.end) + (1.0 - giou(p, t))
    return total / len(pred)


def recall_at(ious: Sequence[float], m: float) -> float:
    """Fraction of IoUs at or above threshold ``m``."""
    if len(ious) == 0:
        raise ValueError("recall_at is undefined on an empty IoU list")
    return sum(1 for v in ious if v >= m) / len(ious)


def mean_iou(ious: Sequence[float]) -> float:
    if len(ious) == 0:
        raise ValueError("mean_iou is undefined on an empty IoU list")
    return sum(ious) / len(ious)
