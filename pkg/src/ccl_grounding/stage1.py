"""Context-consistent mean-teacher training (first stage).

The student learns from labeled paragraphs with the usual localization and
attention losses. On unlabeled paragraphs the EMA teacher sees the full
paragraph while the student sees a copy with random sentences removed; the
teacher's intervals (gathered to the kept sentences) select which encoded
clips the student pools into moment features, and a symmetric InfoNCE loss
pulls each moment feature toward its own sentence feature.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .augmentation import RemovalPlan, apply_removal, map_targets, sample_removal
from .model import (
    GroundingModel,
    ModelConfig,
    NonFiniteError,
    adam_init,
    adam_step,
    batch_membership,
    init_params,
    pad_intervals,
    pad_queries,
    pool_batch,
)
from .training import (
    BatchStream,
    Target,
    TrainingDivergence,
    collect_grads,
    sample_rng,
    supervised_losses,
    train_supervised,
)

logger = logging.getLogger(__name__)


@dataclass
class Stage1Config:
    lambda1: float = 2.0
    lambda2: float = 0.75
    tau: float = 0.01
    gamma: float = 0.999
    steps: int = 1500
    batch_labeled: int = 32
    batch_unlabeled: int = 32
    lr: float = 1e-4
    seed: int = 0
    # consistency weight ramps up as exp(-5 (1 - t)^2) over this many steps; 0 disables
    rampup_steps: int = 0
    # ablation switches: mean teacher, sentence removal, contrastive consistency
    mt: bool = True
    aug: bool = True
    cr: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if min(self.lambda1, self.lambda2) < 0:
            raise ValueError("loss weights must be non-negative")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.steps < 0 or self.batch_labeled < 1 or self.batch_unlabeled < 0 or self.rampup_steps < 0:
            raise ValueError("invalid step or batch settings")


def consistency_weight(cfg: Stage1Config, step: int) -> float:
    if cfg.rampup_steps == 0 or step >= cfg.rampup_steps:
        return cfg.lambda2
    t = step / cfg.rampup_steps
    return cfg.lambda2 * math.exp(-5.0 * (1.0 - t) ** 2)


@dataclass
class TeacherState:
    model: GroundingModel
    gamma: float
    step: int = 0

    @classmethod
    def from_student(cls, student: GroundingModel, gamma: float) -> "TeacherState":
        teacher = copy.deepcopy(student)
        teacher.requires_grad_(False)
        return cls(teacher, gamma, 0)


@torch.no_grad()
def ema_update(teacher: TeacherState, student: GroundingModel) -> TeacherState:
    """theta' <- gamma * theta' + (1 - gamma) * theta, parameter by parameter."""
    g = teacher.gamma
    student_params = dict(student.named_parameters())
    for name, tp in teacher.model.named_parameters():
        sp = student_params.get(name)
        if sp is None or sp.shape != tp.shape:
            raise ValueError(f"teacher/student shape mismatch at parameter {name}")
        tp.copy_(g * tp + (1.0 - g) * sp.detach())
    teacher.step += 1
    return teacher


def _cos_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    an = a / a.norm(dim=-1, keepdim=True).clamp_min(1e-300)
    bn = b / b.norm(dim=-1, keepdim=True).clamp_min(1e-300)
    return an @ bn.transpose(-1, -2)


def contrastive_loss_batch(F_m: torch.Tensor, F_q: torch.Tensor, mask: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric InfoNCE per sample over its own K sentences.

    ``F_m``, ``F_q``: (B, K, D); ``mask``: (B, K). Returns (B,) losses.
    logsumexp keeps tau=0.01 (logits up to 100) stable.
    """
    logits = _cos_matrix(F_m, F_q) / tau  # [b, i, j] = cos(F_m(i), F_q(j)) / tau
    pair = mask[:, :, None] & mask[:, None, :]
    logits = logits.masked_fill(~pair, float("-inf"))
    diag = torch.diagonal(logits, dim1=1, dim2=2)
    m2q = torch.logsumexp(logits, dim=2) - diag  # softmax over sentences j
    q2m = torch.logsumexp(logits, dim=1) - diag  # softmax over moments j
    per = (m2q + q2m).masked_fill(~mask, 0.0)
    k = mask.sum(dim=1).clamp_min(1)
    return per.sum(dim=1) / k


def contrastive_consistency_loss(F_m, F_q, tau: float):
    """Single-sample symmetric InfoNCE between K moment and K sentence features."""
    as_float = not isinstance(F_m, torch.Tensor)
    F_m = torch.as_tensor(np.asarray(F_m, dtype=np.float64)) if as_float else F_m
    F_q = torch.as_tensor(np.asarray(F_q, dtype=np.float64)) if as_float else F_q
    if F_m.shape != F_q.shape or F_m.dim() != 2 or F_m.shape[0] < 1:
        raise ValueError(f"need matching (K, D) inputs with K >= 1, got {tuple(F_m.shape)} and {tuple(F_q.shape)}")
    if (F_m.norm(dim=-1) == 0).any() or (F_q.norm(dim=-1) == 0).any():
        raise ValueError("zero-norm feature row: cosine similarity undefined")
    mask = torch.ones(1, F_m.shape[0], dtype=torch.bool)
    loss = contrastive_loss_batch(F_m[None], F_q[None], mask, tau)[0]
    return float(loss) if as_float else loss


def consistency_loss(student: GroundingModel, teacher: GroundingModel, samples: Sequence,
                     plans: Sequence[RemovalPlan], cfg: Stage1Config,
                     teacher_intervals: Optional[list] = None) -> torch.Tensor:
    """Mean unlabeled-batch consistency loss (contrastive, or L1 if ``cfg.cr`` is off).

    The teacher runs on full paragraphs without gradients; its intervals only
    enter through the discrete pooling mask (or as fixed L1 targets).
    """
    videos = torch.from_numpy(np.stack([s.video_feats for s in samples]))
    if teacher_intervals is None:
        with torch.no_grad():
            q_full, m_full = pad_queries([s.query_feats for s in samples])
            t_out = teacher(videos, q_full, m_full).intervals.numpy()
        teacher_intervals = [t_out[b, : s.N] for b, s in enumerate(samples)]
    targets = [map_targets(list(iv), plan) for iv, plan in zip(teacher_intervals, plans)]
    q_aug, mask = pad_queries([apply_removal(s.query_feats, p) for s, p in zip(samples, plans)])
    out = student(videos, q_aug, mask)
    n_max = q_aug.shape[1]
    if cfg.cr:
        beta = batch_membership(targets, videos.shape[1], n_max)
        F_m = pool_batch(out.V_enc, beta)
        per = contrastive_loss_batch(F_m, out.F_q_proj, mask, cfg.tau)
    else:
        tgt = pad_intervals(targets, n_max)
        per = ((out.intervals - tgt).abs().sum(-1) * mask).sum(-1) / mask.sum(-1)
    return per.mean()


def stage1_step(student: GroundingModel, teacher: TeacherState, opt_state: dict,
                labeled: Sequence, unlabeled: Sequence, cfg: Stage1Config, step: int = 0) -> dict:
    """One optimizer step on ``lambda1 (L_loc + L_att) + lambda2 L_con``, then EMA.

    ``lambda2`` follows :func:`consistency_weight` when a ramp-up is configured.

    Mutates ``student``, ``teacher`` and ``opt_state`` in place and returns the
    loss components.
    """
    zero = torch.zeros((), dtype=torch.float64)
    loc = att = con = zero
    try:
        if labeled:
            lo, at = supervised_losses(student, [Target(s, s.gt_intervals) for s in labeled])
            loc, att = lo.mean(), at.mean()
        if unlabeled and cfg.lambda2 > 0:
            plans = [
                sample_removal(s.N, sample_rng(cfg.seed, step, s.id)) if cfg.aug else RemovalPlan.identity(s.N)
                for s in unlabeled
            ]
            con = consistency_loss(student, teacher.model, unlabeled, plans, cfg)
    except NonFiniteError as exc:
        raise TrainingDivergence(step, f"activations ({exc.name})") from exc
    total = cfg.lambda1 * (loc + att) + consistency_weight(cfg, step) * con
    if not torch.isfinite(total):
        raise TrainingDivergence(step)
    student.zero_grad(set_to_none=True)
    if total.requires_grad:
        total.backward()
    adam_step(student, collect_grads(student), opt_state, cfg.lr)
    ema_update(teacher, student)
    return {
        "step": step,
        "loss_total": float(total.detach()),
        "loss_loc": float(loc.detach()),
        "loss_att": float(att.detach()),
        "loss_con": float(con.detach()),
    }


def train_stage1(labeled: Sequence, unlabeled: Sequence, model_cfg: ModelConfig, cfg: Stage1Config,
                 on_step: Optional[Callable[[int, dict], None]] = None):
    """Run ``cfg.steps`` steps; returns ``(student, teacher_or_None, log)``.

    With ``cfg.mt`` off this is plain supervised training on the labeled set
    (with sentence removal applied to labeled paragraphs if ``cfg.aug``), and
    no teacher is returned.
    """
    if not labeled:
        raise ValueError("stage 1 needs at least one labeled sample")
    if not cfg.mt:
        plan_fn = None
        if cfg.aug:
            def plan_fn(item, step):
                return sample_removal(item.sample.N, sample_rng(cfg.seed, step, item.sample.id))
        items = [Target(s, s.gt_intervals, cfg.lambda1) for s in labeled]
        student, _, log = train_supervised(
            items, model_cfg, cfg.steps, cfg.batch_labeled, cfg.lr, cfg.seed, plan_fn=plan_fn, on_step=on_step
        )
        return student, None, log

    student = init_params(model_cfg, cfg.seed)
    teacher = TeacherState.from_student(student, cfg.gamma)
    opt = adam_init(student)
    lab_stream = BatchStream(len(labeled), cfg.batch_labeled, cfg.seed, stream=0)
    unl_stream = BatchStream(len(unlabeled), cfg.batch_unlabeled, cfg.seed, stream=1)
    log = []
    for step in range(cfg.steps):
        lab = [labeled[i] for i in lab_stream.next()]
        unl = [unlabeled[i] for i in unl_stream.next()]
        rec = stage1_step(student, teacher, opt, lab, unl, cfg, step)
        log.append(rec)
        if on_step is not None:
            on_step(step, rec)
    return student, teacher.model, log
