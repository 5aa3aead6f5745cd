import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lesioneval import measures
from lesioneval.measures import MEASURE_NAMES, LesionMeasures, lesion_measures, mape, max_pairwise_distance_mm
from lesioneval.volume import (
    BinaryMask,
    ScalarVolume,
    Spacing,
    Unit,
    connected_components,
    ellipsoid_mask,
    resample_mask,
)

from . import oracles


def _case(mask, suv, spacing=Spacing.iso(2.0), conn=26):
    m = BinaryMask(mask, spacing)
    return ScalarVolume(suv, spacing, Unit.SUV), m, connected_components(m, conn)


def test_single_voxel_closed_form():
    mask = np.zeros((3, 3, 3), bool)
    mask[1, 1, 1] = True
    suv = np.ones((3, 3, 3))
    suv[1, 1, 1] = 7.3
    r = lesion_measures(*_case(mask, suv))
    assert (r.suv_mean, r.suv_max, r.n_lesions, r.dmax_cm) == (7.3, 7.3, 1, 0.0)
    assert r.tmtv_ml == pytest.approx(0.008, rel=1e-12)
    assert r.tlg_ml == pytest.approx(0.0584, rel=1e-12)
    assert not r.empty


def test_dmax_3_4_5():
    mask = np.zeros((4, 5, 1), bool)
    mask[0, 0, 0] = mask[3, 4, 0] = True
    r = lesion_measures(*_case(mask, np.ones(mask.shape), Spacing.iso(10.0)))
    assert r.dmax_cm == pytest.approx(5.0, rel=1e-12)
    assert r.n_lesions == 2


def test_empty_mask_is_flagged_zero():
    r = lesion_measures(*_case(np.zeros((3, 3, 3), bool), np.ones((3, 3, 3))))
    assert r.empty and r == LesionMeasures.zero()
    assert list(r.as_dict()) == list(MEASURE_NAMES)
    assert all(v == 0 for v in r.as_dict().values())


def test_requires_suv_unit():
    suv, m, cc = _case(np.ones((2, 2, 2), bool), np.ones((2, 2, 2)))
    with pytest.raises(ValueError):
        lesion_measures(suv.with_data(suv.data, Unit.HU), m, cc)


@settings(max_examples=100, deadline=None)
@given(
    arrays(bool, (6, 6, 6)),
    arrays(float, (6, 6, 6), elements=st.floats(0, 30)),
    st.sampled_from([(2.0, 2.0, 2.0), (1.0, 2.5, 4.0)]),
)
def test_random_6cube_matches_brute_force(mask, suv, spacing):
    r = lesion_measures(*_case(mask, suv, Spacing(*spacing)))
    n = len(oracles.flood_fill_components(mask, 26))
    expected = oracles.measures(suv, mask, spacing, n)
    for key, value in r.as_dict().items():
        assert value == pytest.approx(expected[key], rel=1e-9, abs=1e-12), key
    if r.n_lesions:
        assert r.suv_mean <= r.suv_max + 1e-12
        assert abs(r.tlg_ml - r.tmtv_ml * r.suv_mean) <= 1e-6 * r.tlg_ml + 1e-15
        cc = connected_components(BinaryMask(mask, Spacing(*spacing)), 26)
        per_lesion = [suv.ravel()[v].max() for v in cc.voxel_lists]
        assert r.suv_max == max(per_lesion)
    assert (r.tmtv_ml > 0) == (r.n_lesions > 0)
    assert (r.dmax_cm == 0) == (mask.sum() <= 1)


@settings(max_examples=40, deadline=None)
@given(arrays(bool, st.tuples(*[st.integers(1, 10)] * 3)))
def test_hull_reduction_equals_all_pairs(mask):
    pts = (np.argwhere(mask) + 0.5) * np.array([1.0, 2.0, 3.0])
    d = pts[:, None, :] - pts[None, :, :]
    naive = float(np.sqrt((d ** 2).sum(-1).max())) if len(pts) >= 2 else 0.0
    old = measures.ALL_PAIRS_LIMIT
    measures.ALL_PAIRS_LIMIT = 0  # force the hull path even for tiny sets
    try:
        assert max_pairwise_distance_mm(pts) == pytest.approx(naive, rel=1e-12)
    finally:
        measures.ALL_PAIRS_LIMIT = old


def test_hull_path_on_large_and_degenerate_sets():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(5000, 3)) * [10, 3, 1]
    d = pts[:, None, :] - pts[None, :, :]
    assert max_pairwise_distance_mm(pts) == pytest.approx(float(np.sqrt((d ** 2).sum(-1).max())), rel=1e-12)
    plane = np.argwhere(np.ones((40, 40, 1))) + 0.5  # coplanar: 1600 points
    assert max_pairwise_distance_mm(plane) == pytest.approx(np.hypot(39, 39), rel=1e-12)
    line = np.column_stack([np.arange(2000.0), np.zeros(2000), np.zeros(2000)])
    assert max_pairwise_distance_mm(line) == pytest.approx(1999.0)


def test_tmtv_scales_with_voxel_volume():
    sp = Spacing.iso(2.0)
    m = BinaryMask(ellipsoid_mask((30, 30, 30), sp, (30, 30, 30), (12, 9, 7)), sp)
    fine = resample_mask(m, Spacing.iso(1.0))
    surface_ml = 4 * np.pi * 9.5 ** 2 * 2.0 / 1000  # generous: one coarse layer over the surface
    assert abs(fine.volume_ml - m.volume_ml) <= surface_ml


def test_mape_examples():
    assert mape([1, 2, 3], [1, 2, 3]).value == 0.0
    assert mape([100], [150]).value == pytest.approx(50.0)
    assert mape([10, 20], [11, 16]).value == pytest.approx(15.0)


def test_mape_exclusions():
    with pytest.warns(UserWarning, match="1 case"):
        r = mape([0, 10], [5, 12])
    assert r.excluded == (0,) and r.n_used == 1 and r.value == pytest.approx(20.0)
    with pytest.raises(ValueError):
        mape([0, 0], [1, 2])
    with pytest.raises(ValueError):
        mape([1, 2], [1])


@given(
    st.lists(st.tuples(st.floats(0.1, 1e3), st.floats(0, 1e3)), min_size=1, max_size=20),
    st.floats(0.01, 100),
)
def test_mape_scale_invariant(pairs, k):
    o = [a for a, _ in pairs]
    p = [b for _, b in pairs]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        base = mape(o, p).value
        scaled = mape([k * x for x in o], [k * x for x in p]).value
    assert scaled == pytest.approx(base, rel=1e-9, abs=1e-9)
