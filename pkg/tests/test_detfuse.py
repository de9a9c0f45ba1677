import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from concordance.concord import FusionConfig
from concordance.detfuse import (
    MUTUAL,
    Box3D,
    BoxCluster,
    ClusterConfig,
    bev_intersection,
    box_from_dict,
    box_to_dict,
    clip_convex,
    detection_record,
    fuse_cluster,
    fused_detection_record,
    greedy_cluster,
    iou3d,
    normalize_yaw,
    polygon_area,
    pseudo_label_frame,
)
from concordance.errors import ConfigError, DegenerateBox
from oracles import mc_iou


def cube(x, score=0.9, teacher=0, index=0, y=0.0, size=(1, 1, 1), yaw=0.0, label=0, C=2):
    return Box3D.from_score([x, y, 0.0], size, yaw, label, score, C, teacher_id=teacher, box_index=index)


def ids(cluster):
    return [(m.teacher_id, m.box_index) for m in cluster.members]


def test_hand_iou_values():
    a = cube(0)
    assert iou3d(a, a) == 1.0
    assert iou3d(cube(0), cube(0.5)) == pytest.approx(1 / 3, abs=1e-15)
    assert iou3d(cube(0), cube(10)) == 0.0


def test_rotated_square_against_closed_form_and_oracle():
    a = Box3D([0, 0, 0], [1, 1, 1], 0.0)
    b = Box3D([0, 0, 0], [1, 1, 1], math.pi / 4)
    exact = 1 / math.sqrt(2)
    assert iou3d(a, b) == pytest.approx(exact, abs=1e-12)
    assert mc_iou(([0, 0, 0], [1, 1, 1], 0.0), ([0, 0, 0], [1, 1, 1], math.pi / 4)) == pytest.approx(exact, abs=1e-3)


def test_random_pairs_against_oracle():
    rng = np.random.default_rng(11)
    for _ in range(5):
        ca, cb = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
        sa, sb = rng.uniform(0.5, 3, 3), rng.uniform(0.5, 3, 3)
        ya, yb = rng.uniform(-math.pi, math.pi, 2)
        got = iou3d(Box3D(ca, sa, ya), Box3D(cb, sb, yb))
        want = mc_iou((ca, sa, ya), (cb, sb, yb), n_log2=18)
        assert got == pytest.approx(want, abs=2e-3)


def test_vertical_overlap_and_parallel_fast_path():
    a = Box3D([0, 0, 0], [2, 1, 1], 0.3)
    b = Box3D([0, 0, 0.5], [2, 1, 1], 0.3)
    assert iou3d(a, b) == pytest.approx(0.5 / 1.5)
    # yaw differing by pi is the same footprint
    c = Box3D([0.4, 0.1, 0], [2, 1, 1], 0.3 + math.pi)
    d = Box3D([0.4, 0.1, 0], [2, 1, 1], 0.3 + 1e-9)
    assert iou3d(a, c) == pytest.approx(iou3d(a, d), abs=1e-7)


@settings(max_examples=200, deadline=None)
@given(
    st.tuples(*[st.floats(-2, 2)] * 3),
    st.tuples(*[st.floats(-2, 2)] * 3),
    st.tuples(*[st.floats(0.1, 3)] * 3),
    st.tuples(*[st.floats(0.1, 3)] * 3),
    st.floats(-4, 4),
    st.floats(-4, 4),
)
def test_iou_symmetric_and_bounded(ca, cb, sa, sb, ya, yb):
    a, b = Box3D(ca, sa, ya), Box3D(cb, sb, yb)
    v = iou3d(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou3d(b, a), abs=1e-12)
    assert iou3d(a, a) == pytest.approx(1.0, abs=1e-12)


def test_degenerate_boxes():
    with pytest.raises(DegenerateBox):
        iou3d(Box3D([0, 0, 0], [1, 0, 1]), cube(0))
    with pytest.raises(ConfigError):
        Box3D([0, 0, 0], [1, 1, 1], 0.0, probs=[0.5, 0.6])


def test_yaw_normalisation():
    assert normalize_yaw(math.pi) == -math.pi
    assert normalize_yaw(-math.pi) == -math.pi
    assert normalize_yaw(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    for y in np.linspace(-20, 20, 101):
        v = normalize_yaw(y)
        assert -math.pi <= v < math.pi
        assert math.cos(v) == pytest.approx(math.cos(y)) and math.sin(v) == pytest.approx(math.sin(y))


def test_polygon_helpers():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    assert polygon_area(sq) == 1.0
    assert polygon_area(sq[:2]) == 0.0
    shifted = sq + [0.5, 0.5]
    assert polygon_area(clip_convex(sq, shifted)) == pytest.approx(0.25)
    assert polygon_area(clip_convex(sq, sq + 5)) == 0.0
    a, b = cube(0), Box3D([0, 0, 0], [1, 1, 1], 0.2)
    assert bev_intersection(a, b) == pytest.approx(bev_intersection(b, a))


def test_greedy_two_clusters():
    A, B, C = cube(0, 0.9, index=0), cube(1 / 9, 0.8, index=1), cube(10, 0.7, index=2)
    assert iou3d(A, B) == pytest.approx(0.8)
    clusters = greedy_cluster([C, B, A], ClusterConfig(0.5))
    assert [ids(c) for c in clusters] == [[(0, 0), (0, 1)], [(0, 2)]]
    assert clusters[0].representative is clusters[0].seed


def test_greedy_chain_tests_against_seed_only():
    A, B, C = cube(0, 0.9, index=0), cube(0.3, 0.8, index=1), cube(0.6, 0.7, index=2)
    assert iou3d(A, B) >= 0.5 and iou3d(B, C) >= 0.5 and iou3d(A, C) < 0.5
    clusters = greedy_cluster([A, B, C], ClusterConfig(0.5))
    assert [ids(c) for c in clusters] == [[(0, 0), (0, 1)], [(0, 2)]]


def test_mutual_mode_differs_from_seed_mode():
    A, B, C = cube(0, 0.9, index=0), cube(0.3, 0.8, index=1), cube(-0.3, 0.7, index=2)
    assert iou3d(B, C) < 0.5
    seed = greedy_cluster([A, B, C], ClusterConfig(0.5))
    mutual = greedy_cluster([A, B, C], ClusterConfig(0.5, mode=MUTUAL))
    assert [ids(c) for c in seed] == [[(0, 0), (0, 1), (0, 2)]]
    assert [ids(c) for c in mutual] == [[(0, 0), (0, 1)], [(0, 2)]]


def test_greedy_edge_cases():
    assert greedy_cluster([]) == []
    far = [cube(5 * i, 0.5 + 0.01 * i, index=i) for i in range(5)]
    assert all(len(c.members) == 1 for c in greedy_cluster(far))
    # equal scores: lower teacher id seeds first
    a, b = cube(0, 0.8, teacher=1), cube(0.05, 0.8, teacher=0)
    assert greedy_cluster([a, b])[0].seed is b
    with pytest.raises(ConfigError):
        ClusterConfig(1.0)
    with pytest.raises(ConfigError):
        ClusterConfig(0.5, mode="all")


def _fuzz_frame(rng, n):
    boxes = []
    scores = rng.permutation(np.linspace(0.3, 0.99, n))
    for i in range(n):
        c = rng.uniform(-3, 3, 3)
        c[2] = 0
        boxes.append(Box3D.from_score(c, rng.uniform(0.8, 2.5, 3), rng.uniform(-3, 3), int(rng.integers(0, 3)),
                                      float(scores[i]), 3, teacher_id=int(rng.integers(0, 3)), box_index=i))
    return boxes


def test_partition_and_permutation_invariance_fuzz():
    rng = np.random.default_rng(5)
    for _ in range(60):
        boxes = _fuzz_frame(rng, int(rng.integers(0, 12)))
        clusters = greedy_cluster(boxes)
        members = sorted(m.box_index for c in clusters for m in c.members)
        assert members == list(range(len(boxes)))
        for c in clusters:
            assert all(iou3d(c.seed, m) >= 0.5 for m in c.members)
            assert all(c.seed.score >= m.score for m in c.members)
        shuffled = list(boxes)
        random.Random(len(boxes)).shuffle(shuffled)
        again = greedy_cluster(shuffled)
        assert [sorted(m.box_index for m in c.members) for c in clusters] == [
            sorted(m.box_index for m in c.members) for c in again
        ]


def test_fuse_cluster_examples():
    probs = [[0.7, 0.3], [0.6, 0.4], [0.4, 0.6]]
    members = tuple(Box3D([0, 0, 0], [1, 1, 1], 0, p, teacher_id=i) for i, p in enumerate(probs))
    fused = fuse_cluster(BoxCluster(members[0], members), FusionConfig(lam=0.1))
    assert fused.fused.label == 0 and fused.fused.confidence == pytest.approx(0.8)
    single = fuse_cluster(BoxCluster(members[2], members[2:]), FusionConfig(lam=0.5))
    assert single.fused.confidence == 0.6
    onehot = tuple(Box3D([0, 0, 0], [1, 1, 1], 0, [0, 1.0], teacher_id=i) for i in range(3))
    assert fuse_cluster(BoxCluster(onehot[0], onehot)).fused.confidence == 1.0
    with pytest.raises(ConfigError):
        fuse_cluster(BoxCluster(members[0], ()))


def test_pseudo_label_frame_examples():
    assert pseudo_label_frame([]) == []
    one = [cube(0, 0.8, index=0), cube(5, 0.6, index=1)]
    out = pseudo_label_frame(one, ClusterConfig(0.5, FusionConfig(theta=0.0)))
    assert [c.fused.confidence for c in out] == [0.8, 0.6]
    a = Box3D([0, 0, 0], [4, 2, 1.5], 0.1, [0.8, 0.2], teacher_id=0)
    b = Box3D([0.05, 0, 0], [4, 2, 1.5], 0.1, [0.7, 0.3], teacher_id=1)
    assert iou3d(a, b) > 0.9
    out = pseudo_label_frame([a, b], ClusterConfig(0.5, FusionConfig(lam=0.2, theta=0.75)))
    assert len(out) == 1 and out[0].fused.confidence == 1.0 and out[0].fused.selected
    low = pseudo_label_frame([cube(0, 0.6)], ClusterConfig(0.5, FusionConfig(theta=0.7)))
    assert low == []
    kept = pseudo_label_frame([cube(0, 0.6)], ClusterConfig(0.5, FusionConfig(theta=0.7)), keep_deselected=True)
    assert len(kept) == 1 and not kept[0].fused.selected


def test_box_interchange_round_trip():
    box = Box3D([1, 2, 3], [4, 2, 1.5], 0.7, [0.1, 0.9], teacher_id=2, box_index=4)
    back = box_from_dict(box_to_dict(box), 2, 4)
    np.testing.assert_array_equal(back.center, box.center)
    np.testing.assert_array_equal(back.probs, box.probs)
    assert back.yaw == box.yaw
    rec = detection_record("f0", "T1", [box])
    assert rec["boxes"][0]["size"] == [4.0, 2.0, 1.5]
    clusters = pseudo_label_frame([box], ClusterConfig(0.5, FusionConfig(theta=0.0)))
    frec = fused_detection_record("f0", clusters)
    assert frec["boxes"][0]["c"] == 0.9 and frec["boxes"][0]["selected"] is True
