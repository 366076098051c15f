import copy
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ccl_grounding.augmentation import RemovalPlan
from ccl_grounding.model import adam_init, backward, init_params
from ccl_grounding.stage1 import (
    Stage1Config,
    TeacherState,
    consistency_loss,
    contrastive_consistency_loss,
    ema_update,
    stage1_step,
    train_stage1,
)


def _single_param_model(value):
    m = torch.nn.Linear(1, 1, bias=False).double()
    with torch.no_grad():
        m.weight.fill_(value)
    return m


def test_ema_hand_value():
    teacher = TeacherState(_single_param_model(2.0), gamma=0.999)
    student = _single_param_model(1.0)
    ema_update(teacher, student)
    assert teacher.model.weight.item() == 1.999
    assert teacher.step == 1
    assert student.weight.item() == 1.0


def test_ema_fixed_point_and_copy():
    t = TeacherState(_single_param_model(0.3), gamma=0.9)
    ema_update(t, _single_param_model(0.3))
    assert t.model.weight.item() == 0.3
    t0 = TeacherState(_single_param_model(5.0), gamma=0.0)
    ema_update(t0, _single_param_model(-1.25))
    assert t0.model.weight.item() == -1.25


def test_ema_shape_mismatch_names_parameter():
    t = TeacherState(torch.nn.Linear(2, 1).double(), gamma=0.9)
    with pytest.raises(ValueError, match="weight"):
        ema_update(t, torch.nn.Linear(3, 1).double())


@given(st.floats(0, 0.9999), st.lists(st.floats(-10, 10), min_size=2, max_size=2))
def test_ema_contracts_toward_student(gamma, vals):
    teacher_val, student_val = vals
    t = TeacherState(_single_param_model(teacher_val), gamma=gamma)
    ema_update(t, _single_param_model(student_val))
    assert abs(t.model.weight.item() - student_val) <= gamma * abs(teacher_val - student_val) + 1e-12


def _infonce_reference(Fm, Fq, tau):
    """Plain-Python symmetric InfoNCE (no max shift; keep tau moderate)."""
    K = len(Fm)
    cos = lambda a, b: sum(x * y for x, y in zip(a, b)) / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))
    S = [[cos(Fm[i], Fq[j]) for j in range(K)] for i in range(K)]
    t1 = sum(-math.log(math.exp(S[i][i] / tau) / sum(math.exp(S[i][j] / tau) for j in range(K))) for i in range(K)) / K
    t2 = sum(-math.log(math.exp(S[i][i] / tau) / sum(math.exp(S[j][i] / tau) for j in range(K))) for i in range(K)) / K
    return t1 + t2


def test_contrastive_single_pair_is_zero():
    assert contrastive_consistency_loss(np.array([[1.0, 2.0]]), np.array([[-3.0, 0.5]]), 0.01) == 0.0


def test_contrastive_identity_pattern():
    expected = 2 * -math.log(math.e / (math.e + 1))
    assert expected == pytest.approx(0.62652, abs=1e-5)
    eye = np.eye(2)
    assert contrastive_consistency_loss(eye, eye, 1.0) == pytest.approx(expected, abs=1e-9)
    assert _infonce_reference(eye.tolist(), eye.tolist(), 1.0) == pytest.approx(expected, abs=1e-12)


def test_contrastive_small_tau_limit():
    eye = np.eye(3)
    assert contrastive_consistency_loss(eye, eye, 0.01) < 1e-40


def test_contrastive_stable_at_small_tau():
    rng = np.random.default_rng(0)
    v = contrastive_consistency_loss(rng.normal(size=(4, 5)), rng.normal(size=(4, 5)), 0.001)
    assert math.isfinite(v) and v >= 0


@settings(deadline=None)
@given(st.integers(1, 5), st.integers(0, 10_000), st.floats(0.05, 2.0))
def test_contrastive_matches_reference(K, seed, tau):
    rng = np.random.default_rng(seed)
    Fm, Fq = rng.normal(size=(K, 4)), rng.normal(size=(K, 4))
    got = contrastive_consistency_loss(Fm, Fq, tau)
    assert got >= 0
    assert got == pytest.approx(_infonce_reference(Fm.tolist(), Fq.tolist(), tau), rel=1e-9, abs=1e-12)


@given(st.integers(0, 10_000), st.integers(0, 2))
def test_contrastive_row_rescaling_invariance(seed, row):
    rng = np.random.default_rng(seed)
    Fm, Fq = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    scaled = Fm.copy()
    scaled[row] *= 7
    assert contrastive_consistency_loss(scaled, Fq, 0.01) == pytest.approx(
        contrastive_consistency_loss(Fm, Fq, 0.01), rel=1e-9
    )


def test_contrastive_zero_row():
    with pytest.raises(ValueError, match="zero-norm"):
        contrastive_consistency_loss(np.array([[0.0, 0.0], [1.0, 0.0]]), np.eye(2), 0.1)


# --- training step ----------------------------------------------------------

def _setup(tiny_split, tiny_model_cfg, **cfg_kw):
    cfg = Stage1Config(steps=1, batch_labeled=4, batch_unlabeled=4, lr=1e-3, gamma=0.9, seed=0, **cfg_kw)
    student = init_params(tiny_model_cfg, 0)
    teacher = TeacherState.from_student(init_params(tiny_model_cfg, 1), cfg.gamma)
    return cfg, student, teacher


def test_lambda2_zero_ignores_unlabeled(tiny_split, tiny_model_cfg):
    cfg, s1, t1 = _setup(tiny_split, tiny_model_cfg, lambda2=0.0)
    s2, t2 = copy.deepcopy(s1), copy.deepcopy(t1)
    lab, unl = tiny_split.train_labeled[:4], tiny_split.train_unlabeled[:4]
    stage1_step(s1, t1, adam_init(s1), lab, unl, cfg)
    stage1_step(s2, t2, adam_init(s2), lab, [], cfg)
    for a, b in zip(s1.parameters(), s2.parameters()):
        assert torch.equal(a, b)


def test_teacher_only_moves_by_ema(tiny_split, tiny_model_cfg):
    cfg, student, teacher = _setup(tiny_split, tiny_model_cfg)
    before = {n: p.clone() for n, p in teacher.model.named_parameters()}
    stage1_step(student, teacher, adam_init(student), tiny_split.train_labeled[:4], tiny_split.train_unlabeled[:4], cfg)
    sp = dict(student.named_parameters())
    for n, p in teacher.model.named_parameters():
        assert p.grad is None
        assert torch.equal(p, cfg.gamma * before[n] + (1 - cfg.gamma) * sp[n].detach())


def test_unlabeled_only_step(tiny_split, tiny_model_cfg):
    cfg, student, teacher = _setup(tiny_split, tiny_model_cfg)
    rec = stage1_step(student, teacher, adam_init(student), [], tiny_split.train_unlabeled[:4], cfg)
    assert rec["loss_loc"] == 0.0 and rec["loss_con"] > 0.0


def test_prediction_consistency_variant(tiny_split, tiny_model_cfg):
    cfg, student, teacher = _setup(tiny_split, tiny_model_cfg, cr=False)
    unl = tiny_split.train_unlabeled[:4]
    plans = [RemovalPlan.identity(s.N) for s in unl]
    with torch.no_grad():
        loss = consistency_loss(student, teacher.model, unl, plans, cfg)
    assert loss.item() > 0
    loss_self = consistency_loss(student, student, unl, plans, cfg)
    assert loss_self.item() == pytest.approx(0.0, abs=1e-12)


def test_overfit_one_batch(tiny_split, tiny_model_cfg):
    cfg, student, teacher = _setup(tiny_split, tiny_model_cfg)
    lab, unl = tiny_split.train_labeled[:4], tiny_split.train_unlabeled[:4]
    opt = adam_init(student)
    losses = [stage1_step(student, teacher, opt, lab, unl, cfg, step=0)["loss_total"] for _ in range(50)]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_zero_steps_teacher_copies_student(tiny_split, tiny_model_cfg):
    cfg = Stage1Config(steps=0, seed=4)
    student, teacher, log = train_stage1(tiny_split.train_labeled, tiny_split.train_unlabeled, tiny_model_cfg, cfg)
    assert log == []
    init = init_params(tiny_model_cfg, 4)
    for a, b, c in zip(student.parameters(), teacher.parameters(), init.parameters()):
        assert torch.equal(a, b) and torch.equal(a, c)


def test_training_is_deterministic(tiny_split, tiny_model_cfg):
    cfg = Stage1Config(steps=3, batch_labeled=4, batch_unlabeled=4, seed=2)
    logs = [train_stage1(tiny_split.train_labeled, tiny_split.train_unlabeled, tiny_model_cfg, cfg)[2] for _ in range(2)]
    assert logs[0] == logs[1]
    assert set(logs[0][0]) == {"step", "loss_total", "loss_loc", "loss_att", "loss_con"}


def test_no_teacher_without_mean_teacher(tiny_split, tiny_model_cfg):
    cfg = Stage1Config(steps=2, batch_labeled=4, mt=False, aug=True, cr=False)
    student, teacher, log = train_stage1(tiny_split.train_labeled, tiny_split.train_unlabeled, tiny_model_cfg, cfg)
    assert teacher is None and len(log) == 2


def test_requires_labeled(tiny_split, tiny_model_cfg):
    with pytest.raises(ValueError):
        train_stage1([], tiny_split.train_unlabeled, tiny_model_cfg, Stage1Config(steps=1))


def test_config_validation():
    with pytest.raises(ValueError):
        Stage1Config(tau=0)
    with pytest.raises(ValueError):
        Stage1Config(lambda1=-1)


def test_consistency_rampup_schedule():
    from ccl_grounding.stage1 import consistency_weight

    cfg = Stage1Config(lambda2=0.75, rampup_steps=100)
    assert consistency_weight(cfg, 0) == pytest.approx(0.75 * math.exp(-5.0))
    assert consistency_weight(cfg, 100) == 0.75
    ws = [consistency_weight(cfg, s) for s in range(101)]
    assert all(a <= b for a, b in zip(ws, ws[1:]))
    assert consistency_weight(Stage1Config(lambda2=0.75), 0) == 0.75
