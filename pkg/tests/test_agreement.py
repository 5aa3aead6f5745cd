import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lesioneval.agreement import (
    KappaBand,
    RaterStack,
    fleiss_kappa,
    kappa_band,
    kappa_mean,
    pairwise_dsc,
    staple,
)
from lesioneval.metrics import dsc
from lesioneval.volume import BinaryMask, GeometryError, Spacing

from . import oracles

ISO = Spacing.iso(2.0)


def _stack(*arrays_):
    return RaterStack(tuple(BinaryMask(np.asarray(a), ISO) for a in arrays_))


def _seeded_stack(seed, shape=(6, 6, 6), n=3, p=0.3):
    rng = np.random.default_rng(seed)
    return [rng.random(shape) < p for _ in range(n)]


def test_stack_validation():
    with pytest.raises(ValueError):
        _stack(np.zeros((2, 2, 2)))
    with pytest.raises(GeometryError):
        _stack(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_identical_raters_kappa_one():
    a = np.zeros((4, 4, 4), bool)
    a[1:3, 1:3, 1:3] = True
    r = fleiss_kappa(_stack(a, a, a))
    assert r.kappa == 1.0 and not r.degenerate and r.band is KappaBand.ALMOST_PERFECT


def test_single_label_everywhere_is_degenerate():
    z = np.zeros((3, 3, 3), bool)
    r = fleiss_kappa(_stack(z, z))
    assert r.kappa == 1.0 and r.degenerate and r.p_e == 1.0


def test_four_voxel_hand_example():
    # per voxel the three raters say 111, 110, 100, 000
    labels = np.array([[1, 1, 1], [1, 1, 0], [1, 0, 0], [0, 0, 0]], bool)
    masks = [labels[:, j].reshape(4, 1, 1) for j in range(3)]
    r = fleiss_kappa(_stack(*masks))
    # sum of squared category counts 28; P_bar = (28 - 12) / 24; both label shares 1/2
    assert r.p_bar == pytest.approx(2 / 3, abs=1e-15)
    assert r.p_e == pytest.approx(0.5, abs=1e-15)
    assert abs(r.kappa - 1 / 3) <= 1e-12
    assert abs(r.kappa - oracles.fleiss(masks)) <= 1e-12
    assert r.band is KappaBand.FAIR


@pytest.mark.parametrize(
    "kappa,band",
    [
        (-0.1, KappaBand.NONE),
        (0.0, KappaBand.SLIGHT),
        (0.20, KappaBand.SLIGHT),
        (0.21, KappaBand.FAIR),
        (0.40, KappaBand.FAIR),
        (0.41, KappaBand.MODERATE),
        (0.60, KappaBand.MODERATE),
        (0.61, KappaBand.SUBSTANTIAL),
        (0.72, KappaBand.SUBSTANTIAL),
        (0.80, KappaBand.SUBSTANTIAL),
        (0.81, KappaBand.ALMOST_PERFECT),
        (1.0, KappaBand.ALMOST_PERFECT),
    ],
)
def test_kappa_bands(kappa, band):
    assert kappa_band(kappa) is band


def test_kappa_mean():
    a = _seeded_stack(1)
    assert kappa_mean([_stack(*a)]) == fleiss_kappa(_stack(*a)).kappa
    with pytest.raises(ValueError):
        kappa_mean([])
    stacks = [_seeded_stack(s) for s in range(9)]
    expected = np.mean([oracles.fleiss(s) for s in stacks])
    assert kappa_mean([_stack(*s) for s in stacks]) == pytest.approx(expected, abs=1e-12)


def _two_rater_stack(both, split, neither):
    # `split` voxels where the raters disagree, half each way
    a = np.array([1] * both + [1] * (split // 2) + [0] * (split - split // 2) + [0] * neither, bool)
    b = np.array([1] * both + [0] * (split // 2) + [1] * (split - split // 2) + [0] * neither, bool)
    return _stack(a.reshape(-1, 1, 1), b.reshape(-1, 1, 1))


def test_kappa_mean_of_two_known_cases():
    # two raters, label shares 1/2 each: kappa = 2 * agreement - 1
    s1 = _two_rater_stack(4, 2, 4)  # agreement 0.8
    s2 = _two_rater_stack(9, 2, 9)  # agreement 0.9
    assert fleiss_kappa(s1).kappa == pytest.approx(0.6, abs=1e-12)
    assert fleiss_kappa(s2).kappa == pytest.approx(0.8, abs=1e-12)
    assert kappa_mean([s1, s2]) == pytest.approx(0.7, abs=1e-12)


def test_kappa_crop_box():
    a, b = _seeded_stack(2, n=2)
    box = ((1, 1, 1), (4, 4, 4))
    cropped = [m[1:5, 1:5, 1:5] for m in (a, b)]
    assert fleiss_kappa(_stack(a, b), box).kappa == pytest.approx(oracles.fleiss(cropped), abs=1e-12)


masks3 = st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)).flatmap(
    lambda s: st.lists(arrays(bool, s), min_size=2, max_size=4)
)


@settings(max_examples=80, deadline=None)
@given(masks3, st.randoms(use_true_random=False))
def test_kappa_invariants(masks, rnd):
    base = fleiss_kappa(_stack(*masks))
    if not base.degenerate:
        assert base.kappa == pytest.approx(oracles.fleiss(masks), abs=1e-12)
    assert base.kappa <= 1.0 + 1e-12
    shuffled = list(masks)
    rnd.shuffle(shuffled)
    assert fleiss_kappa(_stack(*shuffled)).kappa == pytest.approx(base.kappa, abs=1e-12)
    assert fleiss_kappa(_stack(*[~m for m in masks])).kappa == pytest.approx(base.kappa, abs=1e-12)
    unanimous = all(np.array_equal(m, masks[0]) for m in masks)
    assert (abs(base.kappa - 1.0) < 1e-12) == unanimous


def test_pairwise_dsc_examples():
    a = np.zeros((4, 4, 4), bool)
    a[:2] = True
    assert np.array_equal(pairwise_dsc(_stack(a, a, a)), np.ones((3, 3)))
    b = np.zeros_like(a)
    b[2:] = True
    assert np.array_equal(pairwise_dsc(_stack(a, b)), np.eye(2))
    masks = _seeded_stack(5)
    m = pairwise_dsc(_stack(*masks))
    assert np.array_equal(m, m.T) and np.all(np.diag(m) == 1.0)
    for i in range(3):
        for j in range(3):
            if i != j:
                assert m[i, j] == dsc(BinaryMask(masks[i], ISO), BinaryMask(masks[j], ISO))


def test_staple_identical_raters():
    a = np.zeros((5, 5, 5), bool)
    a[1:4, 2:4, 0:3] = True
    r = staple(_stack(a, a, a))
    assert r.converged
    assert np.array_equal(r.consensus.data, a)
    assert np.all(r.sensitivity == 0.99) and np.all(r.specificity == 0.99)


def _majority_instance(seed=2024, k=3):
    rng = np.random.default_rng(seed)
    r1 = rng.random((4, 4, 4)) < 0.4
    r2 = r1.copy()
    flip = rng.choice(64, size=k, replace=False)
    r2.ravel()[flip] ^= True
    return [r1, r2, r1.copy()]


def test_staple_majority_matches_em_oracle():
    masks = _majority_instance()
    r = staple(_stack(*masks))
    w, p, q, _ = oracles.staple_em(masks)
    assert np.max(np.abs(r.probability.ravel() - w)) <= 1e-6
    assert np.array_equal(r.consensus.data, masks[0])
    assert np.allclose(r.sensitivity, p, atol=1e-6) and np.allclose(r.specificity, q, atol=1e-6)


def test_staple_first_two_steps_follow_reference_trace():
    masks = _majority_instance(7, k=5)
    _, _, _, trace = oracles.staple_em(masks, max_iter=2, tol=0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for steps in (1, 2):
            r = staple(_stack(*masks), max_iter=steps, tol=0.0)
            assert not r.converged
            assert np.max(np.abs(r.probability.ravel() - trace[steps - 1])) <= 1e-12
    # by hand, step 1 at the 0.99 clamp: votes 1,1,1 -> 1; votes 1,0,1 -> 1.98 / 1.99
    w1 = np.asarray(trace[0])
    votes = sum(m.ravel().astype(int) for m in masks)
    assert np.all(w1[votes == 3] == 1.0) and np.all(w1[votes == 0] == 0.0)
    two_of_three = (votes == 2) & ~masks[1].ravel()
    assert np.allclose(w1[two_of_three], 1.98 / 1.99, atol=1e-12)


def test_staple_non_convergence_warns():
    masks = _majority_instance(9, k=10)
    with pytest.warns(RuntimeWarning):
        r = staple(_stack(*masks), max_iter=1, tol=0.0)
    assert r.iterations == 1 and not r.converged


def test_staple_even_split_tie_is_foreground():
    a = np.zeros((4, 1, 1), bool)
    b = a.copy()
    a[0] = b[1] = True
    a[2] = b[2] = True
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        r = staple(_stack(a, b), max_iter=1)
    assert r.probability.ravel()[:2].tolist() == [0.5, 0.5]
    assert r.consensus.data.ravel().tolist() == [True, True, True, False]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.permutations([0, 1, 2]))
def test_staple_permutation_invariant(seed, perm):
    masks = _seeded_stack(seed, shape=(4, 4, 3))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a = staple(_stack(*masks))
        b = staple(_stack(*[masks[i] for i in perm]))
    assert np.allclose(a.probability, b.probability, atol=1e-9)
    assert np.allclose(a.sensitivity[list(perm)], b.sensitivity, atol=1e-9)
