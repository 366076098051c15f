"""Shared training plumbing: seeded batch streams, supervised losses, and a
plain supervised loop used both by the labeled-only baseline and by
pseudo-label retraining."""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .augmentation import RemovalPlan, apply_removal, map_targets
from .model import (
    GroundingModel,
    ModelConfig,
    NonFiniteError,
    adam_init,
    adam_step,
    attention_loss_per_sample,
    attention_targets,
    init_params,
    location_loss_per_sample,
    pad_intervals,
    pad_queries,
)

logger = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, what: str = "loss"):
        self.step = step
        super().__init__(f"training diverged at step {step}: non-finite {what}")


def sample_rng(seed: int, step: int, sample_id: str, stream: int = 0) -> np.random.Generator:
    """Independent RNG stream per (seed, step, sample id)."""
    return np.random.default_rng([int(seed), int(step), zlib.crc32(sample_id.encode()), int(stream)])


class BatchStream:
    """Endless mini-batches over ``range(n)`` from seeded epoch permutations."""

    def __init__(self, n: int, batch_size: int, seed: int, stream: int = 0):
        self.n = n
        self.batch_size = min(batch_size, n) if n else 0
        self.rng = np.random.default_rng([int(seed), int(stream), 7919])
        self._buf: list = []

    def next(self) -> list:
        if self.n == 0 or self.batch_size == 0:
            return []
        while len(self._buf) < self.batch_size:
            self._buf.extend(self.rng.permutation(self.n).tolist())
        out, self._buf = self._buf[: self.batch_size], self._buf[self.batch_size :]
        return out


@dataclass
class Target:
    """A training example: sample features, the interval set it is trained
    against, and its loss weight."""

    sample: object
    intervals: list
    weight: float = 1.0
    plan: Optional[RemovalPlan] = None


def supervised_losses(model: GroundingModel, items: Sequence[Target]):
    """Per-sample location and attention losses, each of shape (B,)."""
    videos = [it.sample.video_feats for it in items]
    queries, targets = [], []
    for it in items:
        if it.plan is None:
            queries.append(it.sample.query_feats)
            targets.append(list(it.intervals))
        else:
            queries.append(apply_removal(it.sample.query_feats, it.plan))
            targets.append(map_targets(list(it.intervals), it.plan))
    q, mask = pad_queries(queries)
    out = model(torch.from_numpy(np.stack(videos)), q, mask)
    n_max = q.shape[1]
    T = out.V_enc.shape[1]
    tgt = pad_intervals(targets, n_max)
    loc = location_loss_per_sample(out.intervals, tgt, mask)
    att = attention_loss_per_sample(out.attn, attention_targets(targets, T, n_max), mask)
    return loc, att


def collect_grads(model: GroundingModel) -> dict:
    return {
        n: (p.grad if p.grad is not None else torch.zeros_like(p))
        for n, p in model.named_parameters()
    }


def train_supervised(
    items: Sequence[Target],
    model_cfg: ModelConfig,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    plan_fn: Optional[Callable[[Target, int], Optional[RemovalPlan]]] = None,
    on_step: Optional[Callable[[int, dict], None]] = None,
):
    """Fully supervised training from a fresh init.

    The step loss is the mean over the batch of ``weight * (L_loc + L_att)``.
    ``plan_fn`` optionally returns a sentence-removal plan per item and step.
    Returns ``(model, opt_state, log)``.
    """
    if not items:
        raise ValueError("empty effective training set")
    model = init_params(model_cfg, seed)
    opt = adam_init(model)
    stream = BatchStream(len(items), batch_size, seed, stream=0)
    log = []
    for step in range(steps):
        batch = [items[i] for i in stream.next()]
        if plan_fn is not None:
            batch = [Target(it.sample, it.intervals, it.weight, plan_fn(it, step)) for it in batch]
        weights = torch.tensor([it.weight for it in batch], dtype=torch.float64)
        try:
            loc, att = supervised_losses(model, batch)
        except NonFiniteError as exc:
            raise TrainingDivergence(step, f"activations ({exc.name})") from exc
        total = (weights * (loc + att)).mean()
        if not torch.isfinite(total):
            raise TrainingDivergence(step)
        model.zero_grad(set_to_none=True)
        total.backward()
        adam_step(model, collect_grads(model), opt, lr)
        rec = {
            "step": step,
            "loss_total": float(total.detach()),
            "loss_loc": float(loc.detach().mean()),
            "loss_att": float(att.detach().mean()),
            "loss_con": 0.0,
        }
        log.append(rec)
        if on_step is not None:
            on_step(step, rec)
    return model, opt, log
