"""Test-split evaluation and the per-sentence interval dump."""
from __future__ import annotations

from typing import Optional, Sequence

from .model import GroundingModel, predict_intervals
from .temporal_math import iou, mean_iou, recall_at

THRESHOLDS = (0.3, 0.5, 0.7)
AVERAGING_NOTE = "mIoU and R@m average over sentences pooled across all test samples"


def per_sentence_ious(model: GroundingModel, samples: Sequence) -> list:
    """``[(sample_id, [iou per sentence])]`` in the order given."""
    preds = predict_intervals(model, [s.video_feats for s in samples], [s.query_feats for s in samples])
    return score_predictions(samples, preds)


def score_predictions(samples: Sequence, preds: Sequence) -> list:
    """Per-sentence IoUs of ready-made predictions (one (N, 2) array per sample)."""
    out = []
    for s, p in zip(samples, preds):
        if len(p) != s.N:
            raise ValueError(f"sample {s.id}: {len(p)} predictions for {s.N} sentences")
        if s.gt_intervals is None:
            raise ValueError(f"sample {s.id} has no ground truth to evaluate against")
        out.append((s.id, [iou(tuple(pi), g) for pi, g in zip(p, s.gt_intervals)]))
    return out


def metrics_from_ious(ious: Sequence[float], thresholds=THRESHOLDS) -> dict:
    rep = {f"R@{m}": recall_at(ious, m) for m in thresholds}
    rep["mIoU"] = mean_iou(ious)
    return rep


def evaluate(model: GroundingModel, samples: Sequence, thresholds=THRESHOLDS) -> dict:
    """Recall at each threshold and mIoU over every sentence of ``samples``."""
    if not samples:
        raise ValueError("nothing to evaluate")
    T = samples[0].T
    for s in samples:
        if s.video_feats.shape[1] != model.cfg.D_v or s.query_feats.shape[1] != model.cfg.D_q or s.T != T:
            raise ValueError(f"sample {s.id} feature shapes do not match the model")
    per = per_sentence_ious(model, samples)
    flat = [v for _, ious in per for v in ious]
    rep = metrics_from_ious(flat, thresholds)
    rep["num_sentences"] = len(flat)
    return rep


def _fmt_iv(iv) -> str:
    return f"[{iv[0]:.3f}, {iv[1]:.3f}]"


def dump_predictions(sample, stage1: GroundingModel, stage2: Optional[GroundingModel] = None) -> str:
    """Text table of ground truth vs stage-1 vs stage-2 intervals, per sentence.

    Unlabeled training paragraphs show their ground truth as absent, even if
    the dataset file keeps it for diagnostics.
    """
    stage2 = stage2 if stage2 is not None else stage1
    p1 = predict_intervals(stage1, [sample.video_feats], [sample.query_feats])[0]
    p2 = predict_intervals(stage2, [sample.video_feats], [sample.query_feats])[0]
    gt = sample.gt_intervals if sample.labeled else None
    lines = [f"sample {sample.id} (N={sample.N}, T={sample.T}, labeled={sample.labeled})"]
    lines.append(f"{'sent':>4}  {'source':<7} {'interval':<17} {'IoU vs GT':>9}")
    for i in range(sample.N):
        g = gt[i].as_tuple() if gt is not None else None
        lines.append(f"{i:>4}  {'GT':<7} {_fmt_iv(g) if g else 'absent':<17} {'':>9}")
        for name, p in (("stage1", p1[i]), ("stage2", p2[i])):
            score = f"{iou(tuple(p), g):.4f}" if g else "n/a"
            lines.append(f"{i:>4}  {name:<7} {_fmt_iv(p):<17} {score:>9}")
    return "\n".join(lines) + "\n"
