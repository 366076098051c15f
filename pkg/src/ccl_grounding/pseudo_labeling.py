"""Consistency-guided pseudo-labeling and retraining (second stage).

The stage-1 teacher labels every unlabeled paragraph. Its confidence in a
label is the context consistency ``C``: how well predictions made from
paragraphs with sentences removed agree (IoU) with the full-paragraph
predictions, averaged over the number of kept sentences ``k = 1..N-1``.
Labels are bucketed by ``C``; low ones are dropped and high/mid ones are
trained on with separate loss weights.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .augmentation import RemovalPlan, apply_removal, keep_subset
from .model import GroundingModel, ModelConfig, predict_intervals
from .temporal_math import Interval, iou
from .training import Target, sample_rng, train_supervised

BUCKETS = ("low", "mid", "high")


@dataclass
class Stage2Config:
    lambda3: float = 2.0
    lambda4: float = 4.0
    lambda5: float = 2.0
    thresholds: tuple = (0.4, 0.7)
    repeats: int = 1
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 1

    def __post_init__(self):
        self.thresholds = tuple(float(t) for t in self.thresholds)
        lo, hi = self.thresholds
        if not (0.0 <= lo < hi <= 1.0):
            raise ValueError(f"need 0 <= t_low < t_high <= 1, got {self.thresholds}")
        if min(self.lambda3, self.lambda4, self.lambda5) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


@dataclass
class PseudoLabel:
    sample_id: str
    intervals: list
    consistency: float
    bucket: str

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "intervals": [[float(s), float(e)] for s, e in self.intervals],
            "consistency": float(self.consistency),
            "bucket": self.bucket,
        }


def bucket(C: float, thresholds=(0.4, 0.7)) -> str:
    """``low`` below t_low, ``high`` at or above t_high, ``mid`` between."""
    t_low, t_high = thresholds
    if C < t_low:
        return "low"
    if C < t_high:
        return "mid"
    return "high"


def as_predictor(model) -> Callable:
    """Wrap a model as ``(video_feats, query_feats) -> (n, 2) array``."""
    if isinstance(model, GroundingModel):
        return lambda v, q: predict_intervals(model, [v], [q])[0]
    return model


def draw_consistency_plans(N: int, R: int, rng: np.random.Generator) -> list:
    """``R`` random kept-subsets for every ``k`` in ``1..N-1``, as ``(k, plan)`` pairs."""
    return [(k, keep_subset(N, k, rng)) for k in range(1, N) for _ in range(R)]


def consistency_from_predictions(original, plans: Sequence, augmented: Sequence) -> float:
    """Average over ``k`` of the mean (over draws) of mean IoU between each
    kept sentence's augmented prediction and its full-paragraph prediction."""
    per_k: dict = {}
    for (k, plan), pred in zip(plans, augmented):
        score = sum(iou(tuple(pred[j]), tuple(original[i])) for j, i in enumerate(plan.kept_indices)) / k
        per_k.setdefault(k, []).append(score)
    return float(np.mean([np.mean(v) for _, v in sorted(per_k.items())]))


def context_consistency(teacher, sample, R: int = 1, rng: Optional[np.random.Generator] = None,
                        original=None) -> float:
    """Context consistency ``C`` of ``teacher`` on one sample.

    ``teacher`` is a :class:`GroundingModel` or any predictor callable. A
    single-sentence paragraph has no context to remove and scores 1.0.
    """
    if sample.N == 1:
        return 1.0
    rng = rng if rng is not None else np.random.default_rng(0)
    predict = as_predictor(teacher)
    if original is None:
        original = predict(sample.video_feats, sample.query_feats)
    plans = draw_consistency_plans(sample.N, R, rng)
    augmented = [predict(sample.video_feats, apply_removal(sample.query_feats, p)) for _, p in plans]
    return consistency_from_predictions(original, plans, augmented)


def generate_pseudo_labels(teacher: GroundingModel, unlabeled: Sequence, cfg: Stage2Config,
                           seed: Optional[int] = None) -> list:
    """Label every unlabeled sample, sorted by sample id.

    All augmented views are batched through the teacher in one pass; each
    sample draws its subsets from its own RNG stream.
    """
    seed = cfg.seed if seed is None else seed
    samples = sorted(unlabeled, key=lambda s: s.id)
    if not samples:
        return []
    originals = predict_intervals(teacher, [s.video_feats for s in samples], [s.query_feats for s in samples])
    all_plans, videos, queries = [], [], []
    for s in samples:
        plans = draw_consistency_plans(s.N, cfg.repeats, sample_rng(seed, 0, s.id, stream=2)) if s.N > 1 else []
        all_plans.append(plans)
        for _, p in plans:
            videos.append(s.video_feats)
            queries.append(apply_removal(s.query_feats, p))
    preds = predict_intervals(teacher, videos, queries) if videos else []
    labels, pos = [], 0
    for s, orig, plans in zip(samples, originals, all_plans):
        if plans:
            C = consistency_from_predictions(orig, plans, preds[pos : pos + len(plans)])
            pos += len(plans)
        else:
            C = 1.0
        ivs = [(float(a), float(b)) for a, b in orig]
        labels.append(PseudoLabel(s.id, ivs, C, bucket(C, cfg.thresholds)))
    return labels


def build_retrain_items(labeled: Sequence, unlabeled: Sequence, pseudo_labels: Sequence,
                        cfg: Stage2Config) -> list:
    """Ground-truth items (weight lambda3) followed by high (lambda4) and mid
    (lambda5) pseudo-labeled items in sample-id order. Low ones are dropped, and
    so is any bucket whose weight is zero, so it cannot shift batch composition."""
    by_id = {pl.sample_id: pl for pl in pseudo_labels}
    missing = [s.id for s in unlabeled if s.id not in by_id]
    if missing:
        raise ValueError(f"pseudo labels missing for {len(missing)} unlabeled samples, e.g. {missing[0]}")
    items = [Target(s, s.gt_intervals, cfg.lambda3) for s in labeled]
    weights = {"high": cfg.lambda4, "mid": cfg.lambda5}
    for s in sorted(unlabeled, key=lambda s: s.id):
        pl = by_id[s.id]
        if pl.bucket == "low" or weights[pl.bucket] == 0:
            continue
        if len(pl.intervals) != s.N:
            raise ValueError(f"pseudo label for {s.id} has {len(pl.intervals)} intervals for {s.N} sentences")
        items.append(Target(s, [Interval(a, b) for a, b in pl.intervals], weights[pl.bucket]))
    return items


def retrain(labeled: Sequence, unlabeled: Sequence, pseudo_labels: Sequence, model_cfg: ModelConfig,
            cfg: Stage2Config, on_step=None):
    """Train a fresh model on ground truth plus high/mid pseudo labels.

    Returns ``(model, log)``.
    """
    items = build_retrain_items(labeled, unlabeled, pseudo_labels, cfg)
    model, _, log = train_supervised(items, model_cfg, cfg.steps, cfg.batch_size, cfg.lr, cfg.seed, on_step=on_step)
    return model, log


def save_pseudo_labels(labels: Sequence[PseudoLabel], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for pl in labels:
            fh.write(json.dumps(pl.to_json(), separators=(",", ":")) + "\n")


def load_pseudo_labels(path) -> list:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pl = PseudoLabel(str(rec["sample_id"]), [tuple(map(float, iv)) for iv in rec["intervals"]],
                                 float(rec["consistency"]), str(rec["bucket"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"line {lineno}: malformed pseudo label ({exc})") from None
            if pl.bucket not in BUCKETS:
                raise ValueError(f"line {lineno}: unknown bucket {pl.bucket!r}")
            for s, e in pl.intervals:
                Interval(s, e)
            out.append(pl)
    return out
