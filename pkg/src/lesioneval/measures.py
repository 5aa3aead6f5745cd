"""Patient-level lesion measures and their percentage error."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .volume import BinaryMask, LabeledComponents, ScalarVolume, Spacing, Unit, check_geometry

__all__ = [
    "LesionMeasures",
    "MEASURE_NAMES",
    "lesion_measures",
    "max_pairwise_distance_mm",
    "mape",
    "MapeResult",
]

MEASURE_NAMES = ("suv_mean", "suv_max", "n_lesions", "tmtv_ml", "tlg_ml", "dmax_cm")

# below this many points the all-pairs scan beats building a hull
ALL_PAIRS_LIMIT = 1000


@dataclass(frozen=True)
class LesionMeasures:
    suv_mean: float
    suv_max: float
    n_lesions: int
    tmtv_ml: float
    tlg_ml: float
    dmax_cm: float
    empty: bool = field(default=False, compare=False)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("empty")
        return d

    @classmethod
    def zero(cls) -> "LesionMeasures":
        return cls(0.0, 0.0, 0, 0.0, 0.0, 0.0, empty=True)


def _all_pairs_max(points: np.ndarray, chunk: int = 2048) -> float:
    best = 0.0
    n = len(points)
    for start in range(0, n, chunk):
        block = points[start:start + chunk]
        # compare only against points at or after this block; each pair once
        diff = block[:, None, :] - points[None, start:, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def max_pairwise_distance_mm(points: np.ndarray) -> float:
    """Largest Euclidean distance between any two points (exact).

    The farthest pair are always hull vertices, so the scan runs over hull
    vertices only once the point set is large.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return 0.0
    if len(points) < ALL_PAIRS_LIMIT:
        return _all_pairs_max(points)
    try:
        # QJ joggles degenerate (planar, collinear) inputs; strict extreme
        # points stay hull vertices under the joggle, and the farthest pair
        # are strict extreme points.
        hull = ConvexHull(points, qhull_options="QJ")
        candidates = points[hull.vertices]
    except QhullError:
        candidates = points
    return _all_pairs_max(candidates)


def _centers_mm(linear: np.ndarray, dims, spacing: Spacing) -> np.ndarray:
    idx = np.stack(np.unravel_index(linear, dims), axis=1).astype(np.float64)
    return (idx + 0.5) * np.asarray(spacing.as_tuple())


def lesion_measures(suv: ScalarVolume, mask: BinaryMask, cc: LabeledComponents) -> LesionMeasures:
    """SUVmean/SUVmax over the union of lesions, lesion count, TMTV, TLG and Dmax.

    An empty mask gives the all-zero record with ``empty=True``.
    """
    check_geometry(suv, mask, cc)
    if suv.unit is not Unit.SUV:
        raise ValueError(f"expected a PET volume in SUV, got {suv.unit.value}")
    fg = np.flatnonzero(mask.data.ravel())
    if fg.size == 0:
        return LesionMeasures.zero()
    values = suv.data.ravel()[fg]
    v_ml = mask.voxel_volume_ml
    total = float(values.sum())
    return LesionMeasures(
        suv_mean=total / fg.size,
        suv_max=float(values.max()),
        n_lesions=int(cc.count),
        tmtv_ml=fg.size * v_ml,
        tlg_ml=total * v_ml,
        dmax_cm=max_pairwise_distance_mm(_centers_mm(fg, mask.dims, mask.spacing)) / 10.0,
    )


@dataclass(frozen=True)
class MapeResult:
    value: float
    n_used: int
    excluded: tuple[int, ...] = ()

    def __float__(self) -> float:
        return self.value


def mape(orig: Sequence[float], pred: Sequence[float]) -> MapeResult:
    """Mean absolute percentage error, ``100 * mean(|pred - orig| / |orig|)``.

    Cases with ``orig == 0`` are left out and listed in ``excluded``.
    """
    orig = np.asarray(orig, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if orig.shape != pred.shape or orig.ndim != 1:
        raise ValueError(f"orig and pred must be 1D and equally long, got {orig.shape} and {pred.shape}")
    keep = orig != 0
    excluded = tuple(int(i) for i in np.flatnonzero(~keep))
    if not keep.any():
        raise ValueError("every case has a zero reference value; MAPE is undefined")
    if excluded:
        warnings.warn(f"MAPE: {len(excluded)} case(s) with zero reference value excluded", stacklevel=2)
    err = np.abs((pred[keep] - orig[keep]) / orig[keep])
    return MapeResult(value=100.0 * float(err.mean()), n_used=int(keep.sum()), excluded=excluded)
