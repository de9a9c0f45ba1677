import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from concordance.concord import (
    HUMAN,
    PSEUDO,
    FusionConfig,
    PseudoLabels,
    TeacherOutput,
    assemble_dataset,
    fuse_point,
    fuse_scan,
    fused_record,
    prediction_record,
    read_jsonl,
    record_to_pseudolabels,
    record_to_teacher_output,
    select,
    write_jsonl,
)
from concordance.errors import (
    ConfigError,
    DuplicateSequence,
    EmptyTeacherSet,
    LengthMismatch,
    MalformedFile,
    PointCountMismatch,
)
from oracles import fuse_oracle


def _prob_rows(draw, n_teachers, n_classes):
    rows = []
    for _ in range(n_teachers):
        w = draw(st.lists(st.floats(0.01, 1.0), min_size=n_classes, max_size=n_classes))
        w = np.asarray(w)
        rows.append(w / w.sum())
    return rows


@st.composite
def teacher_sets(draw, max_teachers=5):
    t = draw(st.integers(1, max_teachers))
    c = draw(st.integers(2, 6))
    return _prob_rows(draw, t, c)


def test_hand_case_one_agreeing_teacher():
    pl = fuse_point([[0.7, 0.3], [0.6, 0.4], [0.4, 0.6]], FusionConfig(lam=0.1))
    assert pl.label == 0
    assert pl.confidence == pytest.approx(0.8, abs=1e-15)


def test_hand_case_clip_active():
    pl = fuse_point([[0.9, 0.1], [0.8, 0.2], [0.85, 0.15]], FusionConfig(lam=0.2))
    assert pl.label == 0
    assert pl.confidence == 1.0


def test_single_teacher_passes_through():
    pl = fuse_point([[0.2, 0.5, 0.3]], FusionConfig(lam=0.9))
    assert (pl.label, pl.confidence) == (1, 0.5)


def test_strongest_opinion_not_majority():
    # two teachers lean to class 1, one is very sure about class 0
    pl = fuse_point([[0.45, 0.55], [0.95, 0.05], [0.4, 0.6]], FusionConfig(lam=0.1))
    assert pl.label == 0
    assert pl.confidence == 0.95


def test_ties_go_to_lowest_teacher_then_lowest_class():
    # teachers 0 and 1 share the top probability but disagree on the class
    pl = fuse_point([[0.1, 0.6, 0.3], [0.6, 0.1, 0.3]], FusionConfig(lam=0.0))
    assert pl.label == 1
    pl = fuse_point([[0.45, 0.45, 0.1]], FusionConfig())
    assert pl.label == 0


@settings(max_examples=300, deadline=None)
@given(teacher_sets(), st.sampled_from([0.0, 0.1, 0.3, 1.0]))
def test_matches_scalar_oracle(rows, lam):
    pl = fuse_point(rows, FusionConfig(lam=lam, theta=0.5))
    k, c_hat, c, _ = fuse_oracle(rows, lam)
    assert pl.label == k
    assert abs(pl.confidence - c) <= 1e-12
    assert pl.selected == (pl.confidence >= 0.5)


@settings(max_examples=200, deadline=None)
@given(teacher_sets())
def test_confidence_in_unit_interval_and_lambda_zero_is_y_star(rows):
    pl = fuse_point(rows, FusionConfig(lam=0.0))
    assert 0.0 < pl.confidence <= 1.0
    assert pl.confidence == max(float(np.max(r)) for r in rows)


@settings(max_examples=200, deadline=None)
@given(teacher_sets(max_teachers=4))
def test_agreement_monotonicity(rows):
    lam = 0.1
    C = len(rows[0])
    k_star, c_hat, _, _ = fuse_oracle(rows, lam)
    y_star = max(float(np.max(r)) for r in rows)
    if y_star <= 1.0 / C + 1e-6:
        return
    top = 0.5 * (y_star + 1.0 / C)
    agreeing = np.full(C, (1.0 - top) / (C - 1))
    agreeing[k_star] = top
    after = fuse_point(rows + [agreeing], FusionConfig(lam=lam))
    assert after.label == k_star
    assert after.confidence == pytest.approx(min(1.0, c_hat + lam), abs=1e-12)
    other = (k_star + 1) % C
    dissenting = agreeing.copy()
    dissenting[[k_star, other]] = dissenting[[other, k_star]]
    before = fuse_point(rows, FusionConfig(lam=lam))
    assert fuse_point(rows + [dissenting], FusionConfig(lam=lam)).confidence == before.confidence


@settings(max_examples=200, deadline=None)
@given(teacher_sets(), st.randoms(use_true_random=False))
def test_teacher_order_invariance_when_strongest_is_unique(rows, rnd):
    maxima = sorted((float(np.max(r)) for r in rows), reverse=True)
    if len(maxima) > 1 and maxima[0] == maxima[1]:
        return
    if any(np.sum(r == np.max(r)) > 1 for r in rows):
        return
    perm = list(range(len(rows)))
    rnd.shuffle(perm)
    a = fuse_point(rows, FusionConfig(lam=0.3))
    b = fuse_point([rows[i] for i in perm], FusionConfig(lam=0.3))
    assert a.label == b.label and a.confidence == b.confidence


def test_errors():
    with pytest.raises(EmptyTeacherSet):
        fuse_point([])
    with pytest.raises(LengthMismatch):
        fuse_point([[0.5, 0.5], [0.2, 0.3, 0.5]])
    with pytest.raises(PointCountMismatch):
        fuse_scan([np.full((3, 2), 0.5), np.full((4, 2), 0.5)])
    with pytest.raises(EmptyTeacherSet):
        fuse_scan([])
    with pytest.raises(ConfigError):
        FusionConfig(lam=-0.1)
    with pytest.raises(ConfigError):
        FusionConfig(theta=1.5)


def test_fuse_scan_empty_and_unanimous():
    empty = fuse_scan([np.zeros((0, 3)), np.zeros((0, 3))])
    assert len(empty) == 0
    onehot = np.eye(3)[[0, 2, 1, 1]]
    pl = fuse_scan([onehot, onehot, onehot], FusionConfig(theta=1.0))
    assert np.all(pl.confidences == 1.0) and np.all(pl.selected)
    np.testing.assert_array_equal(pl.labels, [0, 2, 1, 1])


def test_fuse_scan_matches_pointwise_oracle():
    rng = np.random.default_rng(3)
    probs = rng.dirichlet(np.ones(5), size=(3, 100))
    pl = fuse_scan(probs, FusionConfig(lam=0.1, theta=0.6))
    for i in range(100):
        k, _, c, _ = fuse_oracle([probs[t, i] for t in range(3)], 0.1)
        assert pl.labels[i] == k
        assert abs(pl.confidences[i] - c) <= 1e-12
        assert pl.selected[i] == (c >= 0.6)


def test_fuse_scan_accepts_teacher_outputs():
    rng = np.random.default_rng(0)
    outs = [TeacherOutput(f"T{n}", n, rng.dirichlet(np.ones(3), size=7)) for n in (1, 2, 3)]
    a = fuse_scan(outs)
    b = fuse_scan(np.stack([o.probs for o in outs]))
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.confidences, b.confidences)


def test_select_examples():
    pl = PseudoLabels(np.array([0, 1, 2]), np.array([0.8, 0.5, 1.0]), np.ones(3, bool))
    np.testing.assert_array_equal(select(pl, 0.6).selected, [True, False, True])
    assert select(pl, 0.0).selected.all()
    np.testing.assert_array_equal(select(pl, 1.0).selected, [False, False, True])
    with pytest.raises(ConfigError):
        select(pl, -0.1)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(0.01, 1.0), min_size=1, max_size=30),
    st.floats(0.0, 1.0),
    st.floats(0.0, 1.0),
)
def test_select_idempotent_and_monotone(cs, t1, t2):
    c = np.asarray(cs)
    pl = PseudoLabels(np.zeros(len(c), dtype=np.int64), c, np.ones(len(c), bool))
    once = select(pl, t1)
    np.testing.assert_array_equal(select(once, t1).selected, once.selected)
    lo, hi = sorted((t1, t2))
    assert not np.any(select(pl, hi).selected & ~select(pl, lo).selected)


def test_assemble_dataset_union():
    labeled = {"a": np.array([0, 1]), "b": np.array([2])}
    pseudo = {
        "c": PseudoLabels(np.array([1]), np.array([0.8]), np.array([True])),
        "d": PseudoLabels(np.array([0, 0]), np.array([0.9, 0.4]), np.array([True, False])),
        "e": PseudoLabels(np.array([2]), np.array([0.75]), np.array([True])),
    }
    ds = assemble_dataset(labeled, pseudo)
    assert len(ds) == 5
    assert [s.provenance for s in ds] == [HUMAN, HUMAN, PSEUDO, PSEUDO, PSEUDO]
    assert sorted(ds.confidences().tolist()) == sorted([1.0, 1.0, 1.0, 0.8, 0.9, 0.75])
    for s in ds:
        if s.provenance == HUMAN:
            assert np.all(s.confidences == 1.0)


def test_assemble_dataset_degenerate_and_duplicate():
    labeled = {"a": np.array([0, 1])}
    only_l = assemble_dataset(labeled, {})
    assert len(only_l) == 1 and np.all(only_l.confidences() == 1.0)
    pl = PseudoLabels(np.array([1]), np.array([0.8]), np.array([True]))
    only_p = assemble_dataset({}, {"p": pl})
    assert len(only_p) == 1 and only_p.confidences().tolist() == [0.8]
    with pytest.raises(DuplicateSequence):
        assemble_dataset(labeled, {"a": pl})


def test_jsonl_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    out = TeacherOutput("T2", 2, rng.dirichlet(np.ones(4), size=5))
    fused = fuse_scan([out.probs, out.probs], FusionConfig())
    path = tmp_path / "x.jsonl"
    write_jsonl(path, [prediction_record("s0", 3, out), fused_record("s0", 3, fused)])
    pred_rec, fused_rec = read_jsonl(path)
    back = record_to_teacher_output(pred_rec)
    np.testing.assert_array_equal(back.probs, out.probs)
    assert back.teacher_id == "T2" and back.temporal_range == 2
    pl = record_to_pseudolabels(fused_rec)
    np.testing.assert_array_equal(pl.labels, fused.labels)
    np.testing.assert_array_equal(pl.confidences, fused.confidences)
    empty = record_to_teacher_output(prediction_record("s", 0, TeacherOutput("T", 1, np.zeros((0, 3)))))
    assert empty.probs.shape == (0, 3)


def test_read_jsonl_malformed(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"a": 1}\n{oops\n')
    with pytest.raises(MalformedFile):
        read_jsonl(p)
    p.write_bytes(b"\x9e\xff{}")
    with pytest.raises(MalformedFile):
        read_jsonl(p)


def test_teacher_output_validates_rows():
    with pytest.raises(ConfigError):
        TeacherOutput("T", 1, np.array([[0.5, 0.6]]))
    with pytest.raises(LengthMismatch):
        TeacherOutput("T", 1, np.array([0.5, 0.5]))
