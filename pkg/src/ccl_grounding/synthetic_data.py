"""Synthetic video-paragraph grounding benchmark.

Each video is a sequence of ``T`` clip features. A paragraph of ``N`` sentences
describes ``N`` temporally ordered, non-overlapping events. Every event owns a
random unit "concept" vector ``c``; clips whose centers fall inside the event
carry ``W_v @ c`` plus noise, and the matching sentence carries ``W_q @ c``
plus noise. ``W_v`` and ``W_q`` are drawn once per dataset, so a model has to
learn the cross-modal alignment from data.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .temporal_math import Interval, as_interval

FEATURE_DIGITS = 9


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed or violates an invariant."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


@dataclass
class SyntheticConfig:
    num_samples: int = 2000
    num_test: int = 500
    T: int = 32
    D_v: int = 32
    D_q: int = 32
    N_range: tuple = (2, 5)
    noise_std: float = 0.1
    concept_dim: int = 8
    labeled_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        self.N_range = tuple(int(n) for n in self.N_range)
        if self.T < 4:
            raise ValueError(f"T must be >= 4, got {self.T}")
        for name in ("D_v", "D_q", "concept_dim"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be >= 2, got {getattr(self, name)}")
        lo, hi = self.N_range
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid N_range {self.N_range}")
        if not (0.0 < self.labeled_fraction <= 1.0):
            raise ValueError(f"labeled_fraction must lie in (0, 1], got {self.labeled_fraction}")
        if self.num_samples < 1 or self.num_test < 0:
            raise ValueError("need num_samples >= 1 and num_test >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


@dataclass(eq=False)
class Sample:
    id: str
    video_feats: np.ndarray
    query_feats: np.ndarray
    gt_intervals: Optional[list] = None
    labeled: bool = False

    def __post_init__(self):
        self.video_feats = np.asarray(self.video_feats, dtype=np.float64)
        self.query_feats = np.asarray(self.query_feats, dtype=np.float64)
        if self.video_feats.ndim != 2 or self.query_feats.ndim != 2:
            raise ValueError(f"sample {self.id}: features must be 2-d matrices")
        if self.gt_intervals is not None:
            self.gt_intervals = [as_interval(iv) for iv in self.gt_intervals]
            if len(self.gt_intervals) != self.N:
                raise ValueError(
                    f"sample {self.id}: {len(self.gt_intervals)} intervals for {self.N} sentences"
                )
        elif self.labeled:
            raise ValueError(f"sample {self.id}: labeled sample without gt_intervals")

    @property
    def T(self) -> int:
        return self.video_feats.shape[0]

    @property
    def N(self) -> int:
        return self.query_feats.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.id == other.id
            and self.labeled == other.labeled
            and np.array_equal(self.video_feats, other.video_feats)
            and np.array_equal(self.query_feats, other.query_feats)
            and self.gt_intervals == other.gt_intervals
        )


@dataclass
class DatasetSplit:
    train_labeled: list = field(default_factory=list)
    train_unlabeled: list = field(default_factory=list)
    test: list = field(default_factory=list)
    config: Optional[SyntheticConfig] = None

    def __post_init__(self):
        ids = [s.id for s in self.all_samples()]
        if len(ids) != len(set(ids)):
            raise ValueError("sample ids must be unique across splits")
        for s in self.test:
            if s.gt_intervals is None:
                raise ValueError(f"test sample {s.id} carries no gt_intervals")

    def all_samples(self) -> list:
        return [*self.train_labeled, *self.train_unlabeled, *self.test]

    def get(self, sample_id: str) -> Sample:
        for s in self.all_samples():
            if s.id == sample_id:
                return s
        raise KeyError(f"unknown sample id {sample_id!r}")

    def sizes(self) -> dict:
        return {
            "train_labeled": len(self.train_labeled),
            "train_unlabeled": len(self.train_unlabeled),
            "test": len(self.test),
        }

    def __eq__(self, other):
        if not isinstance(other, DatasetSplit):
            return NotImplemented
        return (
            self.train_labeled == other.train_labeled
            and self.train_unlabeled == other.train_unlabeled
            and self.test == other.test
        )


def clip_center(j: int, T: int) -> float:
    """Normalized time of the center of clip ``j`` out of ``T``."""
    if not (0 <= j < T):
        raise IndexError(f"clip index {j} out of range for T={T}")
    return (j + 0.5) / T


def _quantize(x: np.ndarray) -> np.ndarray:
    # Values are stored at the file precision so save/load is exact.
    flat = [float(f"{v:.{FEATURE_DIGITS}g}") for v in np.asarray(x, dtype=np.float64).ravel()]
    return np.array(flat, dtype=np.float64).reshape(np.shape(x))


def _place_events(rng: np.random.Generator, n: int, T: int) -> list:
    """Draw ``n`` ordered intervals whose lengths and gaps are all >= 1/T.

    Uniform over the feasible set: the 2n boundary points are uniform order
    statistics conditioned on all interior spacings being at least ``1/T``,
    sampled directly by shrinking the unit interval and re-inflating.
    """
    min_gap = 1.0 / T
    slack = 1.0 - (2 * n - 1) * min_gap
    if slack <= 0.0:
        raise ValueError(f"cannot place events: {n} events need {(2 * n - 1)} gaps of 1/{T}")
    pts = np.sort(rng.uniform(0.0, slack, size=2 * n))
    pts = pts + min_gap * np.arange(2 * n)
    pts = np.round(pts, FEATURE_DIGITS)
    return [Interval(float(pts[2 * i]), float(pts[2 * i + 1])) for i in range(n)]


def _unit_vectors(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _make_sample(rng, cfg: SyntheticConfig, W_v, W_q, sample_id: str) -> Sample:
    n = int(rng.integers(cfg.N_range[0], cfg.N_range[1] + 1))
    intervals = _place_events(rng, n, cfg.T)
    concepts = _unit_vectors(rng, n, cfg.concept_dim)
    video = rng.normal(0.0, cfg.noise_std, size=(cfg.T, cfg.D_v))
    centers = (np.arange(cfg.T) + 0.5) / cfg.T
    for iv, c in zip(intervals, concepts):
        inside = (centers >= iv.start) & (centers <= iv.end)
        video[inside] += W_v @ c
    query = concepts @ W_q.T + rng.normal(0.0, cfg.noise_std, size=(n, cfg.D_q))
    return Sample(sample_id, _quantize(video), _quantize(query), intervals, labeled=True), concepts


def generate_dataset(cfg: SyntheticConfig, return_latents: bool = False):
    """Build train (labeled + unlabeled) and test splits, deterministic in ``cfg.seed``.

    With ``return_latents`` also returns ``{"W_v", "W_q", "concepts"}`` where
    ``concepts`` maps sample id to its (N, concept_dim) event vectors.
    """
    n_max = cfg.N_range[1]
    if (2 * n_max - 1) / cfg.T >= 1.0:
        raise ValueError(f"cannot place events: N up to {n_max} does not fit into T={cfg.T} clips")
    rng = np.random.default_rng(cfg.seed)
    W_v = rng.standard_normal((cfg.D_v, cfg.concept_dim)) / math.sqrt(cfg.concept_dim)
    W_q = rng.standard_normal((cfg.D_q, cfg.concept_dim)) / math.sqrt(cfg.concept_dim)

    train, test, concepts = [], [], {}
    for name, count, out in (("train", cfg.num_samples, train), ("test", cfg.num_test, test)):
        for i in range(count):
            sample, c = _make_sample(rng, cfg, W_v, W_q, f"{name}-{i:05d}")
            out.append(sample)
            concepts[sample.id] = c

    order = rng.permutation(cfg.num_samples)
    n_labeled = max(1, int(round(cfg.labeled_fraction * cfg.num_samples)))
    labeled_ids = set(int(i) for i in order[:n_labeled])
    labeled, unlabeled = [], []
    for i, s in enumerate(train):
        if i in labeled_ids:
            labeled.append(s)
        else:
            # gt is kept only for diagnostics; training code never reads it
            s.labeled = False
            unlabeled.append(s)
    split = DatasetSplit(labeled, unlabeled, test, config=cfg)
    if return_latents:
        return split, {"W_v": W_v, "W_q": W_q, "concepts": concepts}
    return split


# --- persistence -----------------------------------------------------------

def _sample_record(s: Sample, split: str) -> dict:
    return {
        "id": s.id,
        "split": split,
        "labeled": bool(s.labeled),
        "T": s.T,
        "N": s.N,
        "video_feats": s.video_feats.tolist(),
        "query_feats": s.query_feats.tolist(),
        "gt_intervals": None if s.gt_intervals is None else [list(iv.as_tuple()) for iv in s.gt_intervals],
    }


def _format_floats(obj):
    # 9 significant digits; quantized values re-read to the identical double
    if isinstance(obj, float):
        return float(f"{obj:.{FEATURE_DIGITS}g}")
    if isinstance(obj, list):
        return [_format_floats(o) for o in obj]
    if isinstance(obj, dict):
        return {k: _format_floats(v) for k, v in obj.items()}
    return obj


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save_dataset(split: DatasetSplit, path) -> None:
    """Write one JSON object per sample plus a ``<name>.meta.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for name, samples in (("train", split.train_labeled + split.train_unlabeled), ("test", split.test)):
            for s in sorted(samples, key=lambda s: s.id):
                fh.write(json.dumps(_format_floats(_sample_record(s, name)), separators=(",", ":")) + "\n")
    meta = {
        "config": asdict(split.config) if split.config is not None else None,
        "sizes": split.sizes(),
    }
    meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _parse_record(rec: dict, lineno: int) -> tuple:
    required = ("id", "labeled", "T", "N", "video_feats", "query_feats", "gt_intervals")
    missing = [k for k in required if k not in rec]
    if missing:
        raise DatasetFormatError(f"missing fields {missing}", lineno)
    try:
        video = np.array(rec["video_feats"], dtype=np.float64)
        query = np.array(rec["query_feats"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(f"bad feature matrix: {exc}", lineno) from None
    if video.ndim != 2 or video.shape[0] != rec["T"]:
        raise DatasetFormatError(f"video_feats shape {video.shape} does not match T={rec['T']}", lineno)
    if query.ndim != 2 or query.shape[0] != rec["N"]:
        raise DatasetFormatError(f"query_feats shape {query.shape} does not match N={rec['N']}", lineno)
    gts = rec["gt_intervals"]
    try:
        intervals = None if gts is None else [Interval(float(s), float(e)) for s, e in gts]
        sample = Sample(str(rec["id"]), video, query, intervals, labeled=bool(rec["labeled"]))
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(f"invalid sample: {exc}", lineno) from None
    if intervals is not None:
        for a, b in zip(intervals, intervals[1:]):
            if b.start < a.end:
                raise DatasetFormatError("gt_intervals overlap or are out of temporal order", lineno)
    split = rec.get("split")
    if split is None:
        split = "test" if sample.id.startswith("test") else "train"
    if split not in ("train", "test"):
        raise DatasetFormatError(f"unknown split {split!r}", lineno)
    return split, sample


def load_dataset(path) -> DatasetSplit:
    path = Path(path)
    labeled, unlabeled, test = [], [], []
    with open(path) as fh:
        lines = fh.readlines()
    if not any(line.strip() for line in lines):
        raise DatasetFormatError("empty dataset file", 1)
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"malformed JSON: {exc.msg}", lineno) from None
        if not isinstance(rec, dict):
            raise DatasetFormatError("expected a JSON object", lineno)
        split, sample = _parse_record(rec, lineno)
        if split == "test":
            test.append(sample)
        elif sample.labeled:
            labeled.append(sample)
        else:
            unlabeled.append(sample)
    cfg = None
    mp = meta_path(path)
    if mp.exists():
        meta = json.loads(mp.read_text())
        if meta.get("config"):
            cfg = SyntheticConfig(**meta["config"])
    try:
        return DatasetSplit(labeled, unlabeled, test, config=cfg)
    except ValueError as exc:
        raise DatasetFormatError(str(exc)) from None
