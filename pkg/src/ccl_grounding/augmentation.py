"""Sentence-removal augmentation and the kept-index mapping.

Removing sentences from a paragraph destroys cross-sentence context. A
:class:`RemovalPlan` records which sentences survive, in their original
order, so predictions on the reduced paragraph can be matched back to the
full-paragraph predictions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class RemovalPlan:
    kept_indices: tuple
    N: int

    def __post_init__(self):
        kept = tuple(int(i) for i in self.kept_indices)
        object.__setattr__(self, "kept_indices", kept)
        if not kept:
            raise ValueError("a removal plan must keep at least one sentence")
        if any(b <= a for a, b in zip(kept, kept[1:])):
            raise ValueError(f"kept_indices must be strictly increasing, got {kept}")
        if kept[0] < 0 or kept[-1] >= self.N:
            raise IndexError(f"kept_indices {kept} out of range for N={self.N}")

    @property
    def M(self) -> int:
        return self.N - len(self.kept_indices)

    @classmethod
    def identity(cls, N: int) -> "RemovalPlan":
        return cls(tuple(range(N)), N)


def half_policy(N: int, rng: np.random.Generator) -> int:
    """Number of sentences to drop: uniform on ``{1, ..., ceil(N/2)}``."""
    return int(rng.integers(1, math.ceil(N / 2) + 1))


def sample_removal(N: int, rng: np.random.Generator,
                   policy: Optional[Callable[[int, np.random.Generator], int]] = None) -> RemovalPlan:
    if N < 1:
        raise ValueError("need at least one sentence")
    if N == 1:
        return RemovalPlan.identity(1)
    M = (policy or half_policy)(N, rng)
    M = min(max(M, 0), N - 1)
    removed = set(rng.choice(N, size=M, replace=False).tolist()) if M else set()
    return RemovalPlan(tuple(i for i in range(N) if i not in removed), N)


def keep_subset(N: int, k: int, rng: np.random.Generator) -> RemovalPlan:
    """Uniform random plan keeping exactly ``k`` of ``N`` sentences."""
    if not (1 <= k <= N):
        raise ValueError(f"cannot keep {k} of {N} sentences")
    kept = np.sort(rng.choice(N, size=k, replace=False))
    return RemovalPlan(tuple(kept.tolist()), N)


def _check(plan: RemovalPlan, n: int, what: str):
    if n != plan.N:
        raise ValueError(f"{what} has {n} rows but the plan was drawn for N={plan.N}")


def apply_removal(query_feats: np.ndarray, plan: RemovalPlan) -> np.ndarray:
    """Rows of ``query_feats`` at the kept indices, in order."""
    query_feats = np.asarray(query_feats)
    _check(plan, query_feats.shape[0], "query_feats")
    return query_feats[list(plan.kept_indices)]


def map_targets(full_set: Sequence, plan: RemovalPlan) -> list:
    """Entry ``j`` is the full-paragraph entry of the ``j``-th kept sentence."""
    _check(plan, len(full_set), "interval set")
    return [full_set[i] for i in plan.kept_indices]
