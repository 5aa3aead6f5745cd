import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesioneval.detection import (
    IOU_THRESHOLD,
    Criterion,
    _lexicographic_optimum,
    criterion1,
    criterion2,
    criterion3,
    match_lesions,
)
from lesioneval.volume import BinaryMask, ScalarVolume, Spacing, connected_components

from . import oracles
from .conftest import jitter, random_boxes

ISO = Spacing.iso(2.0)


def _cc(a, conn=26):
    return connected_components(BinaryMask(np.asarray(a), ISO), conn)


def _suv(a):
    return ScalarVolume(np.asarray(a, float), ISO)


def _blobs(shape, *slices):
    a = np.zeros(shape, bool)
    for s in slices:
        a[s] = True
    return a


def test_identical_sets_match_themselves():
    a = _blobs((10, 10, 10), np.s_[0:2, 0:2, 0:2], np.s_[5:7, 5:9, 5], np.s_[9, 9, 9])
    m = match_lesions(_cc(a), _cc(a))
    assert [(g, p) for g, p, _ in m.pairs] == [(1, 1), (2, 2), (3, 3)]
    assert all(iou == 1.0 for _, _, iou in m.pairs)
    assert m.unmatched_gt == () and m.unmatched_pred == ()


def test_disjoint_sets_have_no_pairs():
    a = _blobs((10, 10, 10), np.s_[0:2, 0:2, 0:2])
    b = _blobs((10, 10, 10), np.s_[5:7, 5:7, 5:7], np.s_[9, 0, 0])
    m = match_lesions(_cc(a), _cc(b))
    assert m.pairs == () and m.unmatched_gt == (1,) and m.unmatched_pred == (1, 2)


def test_global_optimum_beats_greedy():
    w = np.array([[0.6, 0.2], [0.5, 0.4]])
    assert _lexicographic_optimum(w) == {0: 0, 1: 1}
    total, pairs = oracles.best_matching(w.tolist())
    assert pairs == [(1, 1), (2, 2)] and total == pytest.approx(1.0)


def test_tie_break_prefers_smallest_labels():
    w = np.array([[0.5, 0.5], [0.5, 0.5]])
    assert _lexicographic_optimum(w) == {0: 0, 1: 1}
    # row 0 may stay unmatched only if every partner loses optimality
    w = np.array([[0.3, 0.0], [0.3, 0.0]])
    assert _lexicographic_optimum(w) == {0: 0}
    w = np.array([[0.2, 0.4], [0.0, 0.4]])
    assert _lexicographic_optimum(w) == {0: 0, 1: 1}


def test_geometry_mismatch():
    a = np.ones((2, 2, 2), bool)
    with pytest.raises(ValueError):
        match_lesions(_cc(a), connected_components(BinaryMask(a, Spacing.iso(3.0))))


def test_criterion1_examples():
    gt = _blobs((12, 12, 12), np.s_[0:2, 0:2, 0:2], np.s_[5:7, 5:7, 5:7], np.s_[10:12, 10:12, 10:12])
    out = criterion1(_cc(gt), _cc(gt))
    assert out.sensitivity == 1.0 and out.fp == 0 and out.criterion is Criterion.C1

    pred = _blobs((12, 12, 12), np.s_[1, 1, 1:4])  # touches lesion 1 in one voxel
    out = criterion1(_cc(gt), _cc(pred))
    assert out.sensitivity == pytest.approx(1 / 3) and out.fp == 0 and out.tp == 1 and out.fn == 2

    pred = _blobs((12, 12, 12), np.s_[0, 11, 0])
    out = criterion1(_cc(gt), _cc(pred))
    assert (out.tp, out.fp, out.fn) == (0, 1, 3)


def test_no_lesion_outcome():
    e = np.zeros((4, 4, 4), bool)
    p = _blobs((4, 4, 4), np.s_[0, 0, 0])
    for out in (criterion1(_cc(e), _cc(p)), criterion2(match_lesions(_cc(e), _cc(p)))):
        assert out.no_lesion and out.sensitivity is None and out.fp == 1


HAND_GT = _blobs((1, 1, 3), np.s_[0, 0, 0:2])
HAND_PRED = _blobs((1, 1, 3), np.s_[0, 0, 1:3])


def test_criterion2_hand_case():
    m = match_lesions(_cc(HAND_GT), _cc(HAND_PRED))
    assert m.pairs[0][2] == pytest.approx(1 / 3)
    out = criterion2(m)
    assert (out.tp, out.fp, out.fn, out.fn_strict) == (0, 1, 1, 0)
    assert criterion2(m, 1 / 3).tp == 1


def test_criterion2_threshold_inclusive_and_validated():
    assert IOU_THRESHOLD == 0.5
    gt = _blobs((1, 1, 4), np.s_[0, 0, 0:2])
    pred = _blobs((1, 1, 4), np.s_[0, 0, 0:1])
    m = match_lesions(_cc(gt), _cc(pred))
    assert m.pairs[0][2] == 0.5
    assert criterion2(m, 0.5).tp == 1
    for bad in (0.0, -0.1, 1.01):
        with pytest.raises(ValueError):
            criterion2(m, bad)
    m_full = match_lesions(_cc(gt), _cc(gt))
    assert criterion2(m_full).sensitivity == 1.0


def test_criterion3_hand_cases():
    m = match_lesions(_cc(HAND_GT), _cc(HAND_PRED))
    hot_inside = np.array([1.0, 5.0, 0.0]).reshape(1, 1, 3)
    out = criterion3(m, _cc(HAND_GT), _cc(HAND_PRED), _suv(hot_inside))
    assert (out.tp, out.fp, out.fn) == (1, 0, 0)
    hot_outside = np.array([5.0, 1.0, 0.0]).reshape(1, 1, 3)
    out = criterion3(m, _cc(HAND_GT), _cc(HAND_PRED), _suv(hot_outside))
    assert (out.tp, out.fp, out.fn) == (0, 1, 1)
    # tie: the smaller linear index (0,0,0) is the hottest voxel and it lies outside pred
    tie = np.array([5.0, 5.0, 0.0]).reshape(1, 1, 3)
    assert criterion3(m, _cc(HAND_GT), _cc(HAND_PRED), _suv(tie)).tp == 0
    assert criterion3(match_lesions(_cc(HAND_GT), _cc(HAND_GT)), _cc(HAND_GT), _cc(HAND_GT), _suv(tie)).sensitivity == 1.0


def _random_case(seed, conn):
    rng = np.random.default_rng(seed)
    dims = tuple(int(n) for n in rng.integers(2, 9, size=3))
    gt = random_boxes(rng, dims, 4)
    pred = jitter(rng, gt) if rng.random() < 0.7 else np.zeros(dims, bool)
    pred |= random_boxes(rng, dims, 2)
    suv = rng.integers(0, 4, size=dims).astype(float)
    return gt, pred, suv


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([6, 18, 26]))
def test_detection_matches_brute_force(seed, conn):
    gt, pred, suv = _random_case(seed, conn)
    g_cc, p_cc = _cc(gt, conn), _cc(pred, conn)
    gc = oracles.flood_fill_components(gt, conn)
    pc = oracles.flood_fill_components(pred, conn)
    if len(gc) > 6 or len(pc) > 6:
        return
    m = match_lesions(g_cc, p_cc)
    total, pairs = oracles.best_matching(oracles.iou_matrix(gc, pc)) if gc else (0.0, [])
    assert [(g, p) for g, p, _ in m.pairs] == pairs
    assert m.total_iou == pytest.approx(max(total, 0.0), abs=1e-12)

    c1 = criterion1(g_cc, p_cc)
    assert {k: getattr(c1, k) for k in ("tp", "fp", "fn")} == oracles.criterion1(gc, pc)
    c2 = criterion2(m)
    c3 = criterion3(m, g_cc, p_cc, _suv(suv))
    if gc:
        assert {k: getattr(c2, k) for k in ("tp", "fp", "fn", "fn_strict")} == oracles.criterion2(gc, pc)
        assert {k: getattr(c3, k) for k in ("tp", "fp", "fn", "fn_strict")} == oracles.criterion3(gc, pc, suv)
        assert c1.sensitivity >= c2.sensitivity and c1.sensitivity >= c3.sensitivity
        assert c2.tp + c2.fn == len(gc) and c3.tp + c3.fn == len(gc)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_raising_threshold_never_adds_tp(seed, t1, t2):
    gt, pred, _ = _random_case(seed, 26)
    m = match_lesions(_cc(gt), _cc(pred))
    lo, hi = sorted((t1, t2))
    assert criterion2(m, hi).tp <= criterion2(m, lo).tp


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_match_table_invariants(seed):
    gt, pred, _ = _random_case(seed, 6)
    g_cc, p_cc = _cc(gt, 6), _cc(pred, 6)
    m = match_lesions(g_cc, p_cc)
    gs = [g for g, _, _ in m.pairs]
    ps = [p for _, p, _ in m.pairs]
    assert len(set(gs)) == len(gs) and len(set(ps)) == len(ps)
    assert all(iou > 0 for _, _, iou in m.pairs)
    assert sorted(gs + list(m.unmatched_gt)) == list(range(1, g_cc.count + 1))
    assert sorted(ps + list(m.unmatched_pred)) == list(range(1, p_cc.count + 1))
