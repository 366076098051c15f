import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ccl_grounding.estimators import CCLGrounder, MeanTeacherGrounder, SupervisedGrounder, check_paragraph_inputs
from ccl_grounding.stage1 import Stage1Config, train_stage1
from ccl_grounding.model import ModelConfig

SMALL = dict(d_model=16, layers=1, heads=2, steps=3, batch_size=4, lr=1e-3)


def _xy(split, labeled_only=False):
    samples = split.train_labeled + ([] if labeled_only else split.train_unlabeled)
    X = [(s.video_feats, s.query_feats) for s in samples]
    y = [s.gt_intervals if s.labeled else None for s in samples]
    return X, y


def test_check_inputs_rejects_bad_shapes(tiny_split):
    s = tiny_split.train_labeled[0]
    with pytest.raises(ValueError, match="at least one"):
        check_paragraph_inputs([])
    with pytest.raises(ValueError, match="entries"):
        check_paragraph_inputs([(s.video_feats, s.query_feats)], [])
    with pytest.raises(ValueError, match="intervals for"):
        check_paragraph_inputs([(s.video_feats, s.query_feats)], [[(0.0, 0.5)] * (s.N + 1)])
    with pytest.raises(ValueError, match="missing"):
        check_paragraph_inputs([(s.video_feats, s.query_feats)], [None])
    with pytest.raises(ValueError, match="disagree"):
        check_paragraph_inputs([(s.video_feats, s.query_feats), (s.video_feats[:, :3], s.query_feats)])
    bad = s.video_feats.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        check_paragraph_inputs([(bad, s.query_feats)])
    with pytest.raises(ValueError, match="neither"):
        check_paragraph_inputs([42])


def test_get_params_and_clone():
    est = CCLGrounder(lambda2=0.5, thresholds=(0.3, 0.6))
    params = est.get_params()
    assert params["lambda2"] == 0.5 and params["thresholds"] == (0.3, 0.6)
    assert clone(est).get_params() == params


def test_predict_before_fit_raises(tiny_split):
    X, _ = _xy(tiny_split)
    with pytest.raises(NotFittedError):
        SupervisedGrounder().predict(X)


def test_supervised_matches_functional_baseline(tiny_split):
    X, y = _xy(tiny_split, labeled_only=True)
    est = SupervisedGrounder(**SMALL, random_state=5).fit(X, y)
    cfg = ModelConfig(D_v=6, D_q=5, D=16, enc_layers=1, dec_layers=1, heads=2, ffn_dim=32)
    s1 = Stage1Config(steps=3, batch_labeled=4, lr=1e-3, seed=5, mt=False, aug=False, cr=False)
    model, _, _ = train_stage1(tiny_split.train_labeled, [], cfg, s1)
    for p, q in zip(est.model_.parameters(), model.parameters()):
        assert p.detach().equal(q.detach())


def test_mean_teacher_predicts_with_teacher(tiny_split):
    X, y = _xy(tiny_split)
    est = MeanTeacherGrounder(**SMALL).fit(X, y)
    assert est.model_ is not est.student_
    preds = est.predict(X[:3])
    assert [p.shape for p in preds] == [(len(q), 2) for _, q in X[:3]]
    assert 0.0 <= est.score(X[: len(tiny_split.train_labeled)], y[: len(tiny_split.train_labeled)]) <= 1.0


def test_mean_teacher_needs_labels(tiny_split):
    X, y = _xy(tiny_split)
    with pytest.raises(ValueError, match="labeled"):
        MeanTeacherGrounder(**SMALL).fit(X, [None] * len(X))


def test_ccl_grounder_two_stages(tiny_split):
    X, y = _xy(tiny_split)
    est = CCLGrounder(**SMALL).fit(X, y)
    assert est.teacher_ is not est.model_
    assert len(est.pseudo_labels_) == len(tiny_split.train_unlabeled)
    assert all(pl.bucket in ("low", "mid", "high") for pl in est.pseudo_labels_)


def test_predict_rejects_other_dims(tiny_split):
    X, y = _xy(tiny_split, labeled_only=True)
    est = SupervisedGrounder(**SMALL).fit(X, y)
    v, q = X[0]
    with pytest.raises(ValueError, match="dimensions"):
        est.predict([(v[:, :4], q)])
