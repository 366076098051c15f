import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from ccl_grounding.model import init_params
from ccl_grounding.pseudo_labeling import (
    PseudoLabel,
    Stage2Config,
    bucket,
    build_retrain_items,
    context_consistency,
    generate_pseudo_labels,
    load_pseudo_labels,
    retrain,
    save_pseudo_labels,
)
from ccl_grounding.synthetic_data import Sample

from stubs import ScriptedStub, SubsetSensitiveStub, context_blind, paragraph


def test_bucket_boundaries():
    assert bucket(0.39) == "low"
    assert bucket(0.4) == "mid"
    assert bucket(0.69) == "mid"
    assert bucket(0.7) == "high"
    assert bucket(1.0) == "high"
    assert bucket(0.5, (0.2, 0.5)) == "high"


@given(st.floats(0, 1), st.floats(0, 1))
def test_bucket_monotone(a, b):
    order = {"low": 0, "mid": 1, "high": 2}
    lo, hi = min(a, b), max(a, b)
    assert order[bucket(lo)] <= order[bucket(hi)]


def test_consistency_two_sentences():
    # k ranges over {1}; the surviving sentence scores IoU 0.5
    stub = ScriptedStub(2, {1: [0.5]})
    assert context_consistency(stub, paragraph(2), R=1, rng=np.random.default_rng(0)) == pytest.approx(0.5, abs=1e-12)


def test_consistency_three_sentences():
    # k=1 -> 0.8; k=2 -> (0.6 + 1.0)/2 = 0.8; C = (0.8 + 0.8)/2
    stub = ScriptedStub(3, {1: [0.8], 2: [0.6, 1.0]})
    assert context_consistency(stub, paragraph(3), R=1, rng=np.random.default_rng(0)) == pytest.approx(0.8, abs=1e-12)


@pytest.mark.parametrize("N", [2, 3, 5])
def test_context_blind_model_is_fully_consistent(N):
    assert context_consistency(context_blind, paragraph(N), R=2, rng=np.random.default_rng(1)) == 1.0


def test_single_sentence_is_consistent():
    assert context_consistency(lambda v, q: 1 / 0, paragraph(1)) == 1.0


@given(st.integers(2, 6), st.integers(0, 1000))
def test_consistency_in_unit_interval(N, seed):
    c = context_consistency(SubsetSensitiveStub(N), paragraph(N), R=1, rng=np.random.default_rng(seed))
    assert 0.0 <= c <= 1.0


def test_more_repeats_reduce_variance():
    stub, sample = SubsetSensitiveStub(5), paragraph(5)
    var = {}
    for R in (1, 4):
        cs = [context_consistency(stub, sample, R=R, rng=np.random.default_rng(seed)) for seed in range(20)]
        var[R] = np.var(cs, ddof=1)
    assert var[4] <= var[1]


def test_teacher_model_consistency_in_range(tiny_split, tiny_model_cfg):
    model = init_params(tiny_model_cfg, 0)
    s = max(tiny_split.train_unlabeled, key=lambda s: s.N)
    assert 0.0 <= context_consistency(model, s, R=2, rng=np.random.default_rng(0)) <= 1.0


def test_generate_matches_per_sample_scoring(tiny_split, tiny_model_cfg):
    from ccl_grounding.training import sample_rng

    model = init_params(tiny_model_cfg, 0)
    cfg = Stage2Config(repeats=2, seed=3)
    labels = generate_pseudo_labels(model, tiny_split.train_unlabeled, cfg)
    assert [pl.sample_id for pl in labels] == sorted(s.id for s in tiny_split.train_unlabeled)
    for pl in labels:
        s = tiny_split.get(pl.sample_id)
        assert len(pl.intervals) == s.N
        assert pl.bucket == bucket(pl.consistency, cfg.thresholds)
        ref = context_consistency(model, s, R=2, rng=sample_rng(3, 0, s.id, stream=2))
        assert pl.consistency == pytest.approx(ref, abs=1e-9)


def test_generate_empty_and_single_sentence(tiny_model_cfg):
    model = init_params(tiny_model_cfg, 0)
    assert generate_pseudo_labels(model, [], Stage2Config()) == []
    rng = np.random.default_rng(0)
    singles = [Sample(f"u{i}", rng.normal(size=(8, 6)), rng.normal(size=(1, 5))) for i in range(3)]
    labels = generate_pseudo_labels(model, singles, Stage2Config())
    assert all(pl.consistency == 1.0 and pl.bucket == "high" for pl in labels)


def test_generate_is_deterministic(tmp_path, tiny_split, tiny_model_cfg):
    model = init_params(tiny_model_cfg, 0)
    for i in range(2):
        save_pseudo_labels(generate_pseudo_labels(model, tiny_split.train_unlabeled, Stage2Config()), tmp_path / f"{i}.jsonl")
    assert (tmp_path / "0.jsonl").read_bytes() == (tmp_path / "1.jsonl").read_bytes()


def test_pseudo_label_file_round_trip(tmp_path):
    labels = [PseudoLabel("a", [(0.1, 0.2), (0.3, 0.5)], 0.55, "mid"), PseudoLabel("b", [(0.0, 1.0)], 1.0, "high")]
    save_pseudo_labels(labels, tmp_path / "pl.jsonl")
    assert load_pseudo_labels(tmp_path / "pl.jsonl") == labels


def test_pseudo_label_file_rejects_bad_bucket(tmp_path):
    (tmp_path / "pl.jsonl").write_text('{"sample_id":"a","intervals":[[0.1,0.2]],"consistency":0.5,"bucket":"odd"}\n')
    with pytest.raises(ValueError, match="line 1"):
        load_pseudo_labels(tmp_path / "pl.jsonl")


def _labels(split, buckets):
    return [PseudoLabel(s.id, [iv.as_tuple() for iv in s.gt_intervals], 0.5, b)
            for s, b in zip(sorted(split.train_unlabeled, key=lambda s: s.id), buckets)]


def test_retrain_items_weights_and_exclusion(tiny_split):
    cfg = Stage2Config()
    n = len(tiny_split.train_unlabeled)
    buckets = ["low", "mid", "high"] * (n // 3) + ["low"] * (n % 3)
    items = build_retrain_items(tiny_split.train_labeled, tiny_split.train_unlabeled, _labels(tiny_split, buckets), cfg)
    n_lab = len(tiny_split.train_labeled)
    assert [it.weight for it in items[:n_lab]] == [cfg.lambda3] * n_lab
    expected = [{"mid": cfg.lambda5, "high": cfg.lambda4}[b] for b in buckets if b != "low"]
    assert [it.weight for it in items[n_lab:]] == expected


def test_all_low_leaves_labeled_only(tiny_split):
    labels = _labels(tiny_split, ["low"] * len(tiny_split.train_unlabeled))
    items = build_retrain_items(tiny_split.train_labeled, tiny_split.train_unlabeled, labels, Stage2Config())
    assert [it.sample.id for it in items] == [s.id for s in tiny_split.train_labeled]


def test_missing_labels_rejected(tiny_split):
    with pytest.raises(ValueError, match="missing"):
        build_retrain_items(tiny_split.train_labeled, tiny_split.train_unlabeled, [], Stage2Config())


def test_empty_training_set(tiny_split, tiny_model_cfg):
    with pytest.raises(ValueError, match="empty"):
        retrain([], [], [], tiny_model_cfg, Stage2Config(steps=1))


def test_zero_pseudo_weights_equal_ground_truth_training(tiny_split, tiny_model_cfg):
    from ccl_grounding.stage1 import Stage1Config, train_stage1

    cfg = Stage2Config(lambda4=0.0, lambda5=0.0, steps=3, batch_size=6, seed=4)
    n = len(tiny_split.train_unlabeled)
    labels = _labels(tiny_split, ["high", "mid"] * (n // 2) + ["high"] * (n % 2))
    m1, _ = retrain(tiny_split.train_labeled, tiny_split.train_unlabeled, labels, tiny_model_cfg, cfg)
    s1 = Stage1Config(steps=3, batch_labeled=6, seed=4, mt=False, aug=False, cr=False)
    m2, _, _ = train_stage1(tiny_split.train_labeled, [], tiny_model_cfg, s1)
    for p, q in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p, q)


def test_stage2_config_validation():
    with pytest.raises(ValueError):
        Stage2Config(thresholds=(0.7, 0.4))
    with pytest.raises(ValueError):
        Stage2Config(repeats=0)
