"""scikit-learn style wrappers around the training functions.

``X`` is a sequence of paragraphs, each either a ``Sample`` or a
``(video_feats, query_feats)`` pair with shapes (T, D_v) and (N, D_q).
``y`` is a matching sequence of interval sets; ``None`` entries mark
unlabeled paragraphs for the semi-supervised estimators.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .evaluation import metrics_from_ious
from .model import GroundingModel, ModelConfig, predict_intervals
from .pseudo_labeling import Stage2Config, generate_pseudo_labels, retrain
from .stage1 import Stage1Config, train_stage1
from .synthetic_data import Sample
from .temporal_math import as_interval_set, iou


def check_paragraph_inputs(X, y=None, allow_unlabeled: bool = False) -> list:
    """Validate ``X`` (and ``y``) and return a list of :class:`Sample`.

    Every paragraph must share T, D_v and D_q. With ``allow_unlabeled`` off,
    every ``y`` entry must be an interval set of length N.
    """
    if X is None or len(X) == 0:
        raise ValueError("X must contain at least one paragraph")
    if y is not None and len(y) != len(X):
        raise ValueError(f"X has {len(X)} paragraphs but y has {len(y)} entries")
    samples = []
    for i, x in enumerate(X):
        if isinstance(x, Sample):
            video, query = x.video_feats, x.query_feats
        else:
            try:
                video, query = x
            except (TypeError, ValueError):
                raise ValueError(f"X[{i}] is neither a Sample nor a (video, query) pair") from None
        video = np.asarray(video, dtype=np.float64)
        query = np.asarray(query, dtype=np.float64)
        if video.ndim != 2 or query.ndim != 2 or query.shape[0] < 1:
            raise ValueError(f"X[{i}]: expected 2-d video and query matrices with N >= 1")
        if not (np.isfinite(video).all() and np.isfinite(query).all()):
            raise ValueError(f"X[{i}] contains non-finite features")
        target = None if y is None else y[i]
        if target is None and y is not None and not allow_unlabeled:
            raise ValueError(f"y[{i}] is missing; this estimator needs every paragraph labeled")
        if target is not None:
            target = as_interval_set(target)
            if len(target) != query.shape[0]:
                raise ValueError(f"y[{i}] has {len(target)} intervals for {query.shape[0]} sentences")
        sid = x.id if isinstance(x, Sample) else f"x-{i:06d}"
        samples.append(Sample(sid, video, query, target, labeled=target is not None))
    shapes = {(s.T, s.video_feats.shape[1], s.query_feats.shape[1]) for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"paragraphs disagree on (T, D_v, D_q): {sorted(shapes)}")
    return samples


class _GrounderBase(BaseEstimator, RegressorMixin):
    def _model_config(self, sample: Sample) -> ModelConfig:
        return ModelConfig(
            D_v=sample.video_feats.shape[1],
            D_q=sample.query_feats.shape[1],
            D=self.d_model,
            enc_layers=self.layers,
            dec_layers=self.layers,
            heads=self.heads,
            ffn_dim=2 * self.d_model,
        )

    def _fitted_model(self) -> GroundingModel:
        check_is_fitted(self, "model_")
        return self.model_

    def predict(self, X) -> list:
        """List of (N, 2) interval arrays, one per paragraph."""
        model = self._fitted_model()
        samples = check_paragraph_inputs(X)
        if samples[0].video_feats.shape[1] != model.cfg.D_v or samples[0].query_feats.shape[1] != model.cfg.D_q:
            raise ValueError("feature dimensions differ from the ones seen in fit")
        return predict_intervals(model, [s.video_feats for s in samples], [s.query_feats for s in samples])

    def score(self, X, y, sample_weight=None) -> float:
        """Mean IoU over all sentences."""
        samples = check_paragraph_inputs(X, y)
        preds = self.predict(samples)
        ious = [iou(tuple(p), g) for s, ps in zip(samples, preds) for p, g in zip(ps, s.gt_intervals)]
        return metrics_from_ious(ious)["mIoU"]


class SupervisedGrounder(_GrounderBase):
    """Labeled-only baseline."""

    def __init__(self, d_model=64, layers=3, heads=4, steps=1500, batch_size=32, lr=1e-4,
                 lambda1=2.0, random_state=0):
        self.d_model = d_model
        self.layers = layers
        self.heads = heads
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.lambda1 = lambda1
        self.random_state = random_state

    def fit(self, X, y):
        samples = check_paragraph_inputs(X, y)
        cfg = Stage1Config(lambda1=self.lambda1, steps=self.steps, batch_labeled=self.batch_size,
                           lr=self.lr, seed=self.random_state, mt=False, aug=False, cr=False)
        self.model_, _, self.log_ = train_stage1(samples, [], self._model_config(samples[0]), cfg)
        return self


class MeanTeacherGrounder(_GrounderBase):
    """First-stage training; ``predict`` uses the EMA teacher.

    ``mt``, ``aug`` and ``cr`` switch the mean teacher, sentence removal and
    contrastive consistency parts on or off.
    """

    def __init__(self, d_model=64, layers=3, heads=4, steps=1500, batch_size=32, lr=1e-4,
                 lambda1=2.0, lambda2=0.75, tau=0.01, gamma=0.999, mt=True, aug=True, cr=True,
                 random_state=0):
        self.d_model = d_model
        self.layers = layers
        self.heads = heads
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.tau = tau
        self.gamma = gamma
        self.mt = mt
        self.aug = aug
        self.cr = cr
        self.random_state = random_state

    def _split(self, X, y):
        samples = check_paragraph_inputs(X, y, allow_unlabeled=True)
        labeled = [s for s in samples if s.labeled]
        if not labeled:
            raise ValueError("need at least one labeled paragraph")
        return labeled, [s for s in samples if not s.labeled]

    def fit(self, X, y):
        labeled, unlabeled = self._split(X, y)
        cfg = Stage1Config(
            lambda1=self.lambda1, lambda2=self.lambda2, tau=self.tau, gamma=self.gamma,
            steps=self.steps, batch_labeled=self.batch_size, batch_unlabeled=self.batch_size,
            lr=self.lr, seed=self.random_state, mt=self.mt, aug=self.aug, cr=self.cr,
        )
        self.student_, teacher, self.log_ = train_stage1(labeled, unlabeled, self._model_config(labeled[0]), cfg)
        self.model_ = teacher if teacher is not None else self.student_
        return self


class CCLGrounder(MeanTeacherGrounder):
    """Both stages: mean-teacher training, then consistency-weighted pseudo
    labels and retraining. ``teacher_`` holds the first-stage model and
    ``model_`` the retrained one."""

    def __init__(self, d_model=64, layers=3, heads=4, steps=1500, batch_size=32, lr=1e-4,
                 lambda1=2.0, lambda2=0.75, tau=0.01, gamma=0.999, mt=True, aug=True, cr=True,
                 lambda3=2.0, lambda4=4.0, lambda5=2.0, thresholds=(0.4, 0.7), repeats=1,
                 retrain_steps: Optional[int] = None, random_state=0):
        super().__init__(d_model, layers, heads, steps, batch_size, lr, lambda1, lambda2, tau, gamma,
                         mt, aug, cr, random_state)
        self.lambda3 = lambda3
        self.lambda4 = lambda4
        self.lambda5 = lambda5
        self.thresholds = thresholds
        self.repeats = repeats
        self.retrain_steps = retrain_steps

    def fit(self, X, y):
        labeled, unlabeled = self._split(X, y)
        super().fit(X, y)
        self.teacher_ = self.model_
        cfg2 = Stage2Config(
            lambda3=self.lambda3, lambda4=self.lambda4, lambda5=self.lambda5, thresholds=self.thresholds,
            repeats=self.repeats, steps=self.steps if self.retrain_steps is None else self.retrain_steps,
            batch_size=self.batch_size, lr=self.lr, seed=self.random_state + 1,
        )
        self.pseudo_labels_ = generate_pseudo_labels(self.teacher_, unlabeled, cfg2)
        self.model_, self.retrain_log_ = retrain(labeled, unlabeled, self.pseudo_labels_,
                                                 self._model_config(labeled[0]), cfg2)
        return self
