"""Voxel-grid types, geometry, resampling and connected-component labeling.

Memory layout: every volume is a C-ordered numpy array of shape ``(nx, ny, nz)``.
Axis 0 runs left to right, axis 1 posterior to anterior, axis 2 inferior to
superior (RAS+). The linear index of voxel ``(i, j, k)`` is
``(i * ny + j) * nz + k``, i.e. ``np.ravel_multi_index`` with C order.

Voxel ``(i, j, k)`` has its center at ``((i + 0.5) dx, (j + 0.5) dy, (k + 0.5) dz)``
millimetres from the grid's origin corner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "GeometryError",
    "NoBodyFoundError",
    "Unit",
    "Spacing",
    "ScalarVolume",
    "BinaryMask",
    "LabeledComponents",
    "SuvConversionParams",
    "ResampleMode",
    "check_geometry",
    "connected_components",
    "resample",
    "resample_mask",
    "resample_to_grid",
    "clip_normalize_ct",
    "body_bounding_box",
    "crop",
    "suv_from_activity",
    "sample_patch_centers",
    "F18_HALF_LIFE_MIN",
]

F18_HALF_LIFE_MIN = 109.77
CT_CLIP_HU = (-154.0, 325.0)
BODY_SUV_THRESHOLD = 0.1
DEFAULT_CONNECTIVITY = 26

# voxel-extent ceil() guard against float noise such as 16/2 -> 8.000000000001
_CEIL_EPS = 1e-9


class GeometryError(ValueError):
    """Two grids that must share dims and spacing do not."""


class NoBodyFoundError(ValueError):
    pass


class Unit(str, Enum):
    SUV = "SUV"
    HU = "HU"
    BQ_PER_ML = "BQ_PER_ML"
    NORMALIZED = "NORMALIZED"


class ResampleMode(str, Enum):
    NEAREST = "nearest"
    TRILINEAR = "trilinear"


@dataclass(frozen=True)
class Spacing:
    """Voxel size in millimetres along the three array axes."""

    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        for name in ("dx", "dy", "dz"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value <= 0:
                raise ValueError(f"spacing {name} must be a positive finite number, got {value!r}")
            object.__setattr__(self, name, value)

    @classmethod
    def iso(cls, mm: float) -> "Spacing":
        return cls(mm, mm, mm)

    @classmethod
    def of(cls, value) -> "Spacing":
        if isinstance(value, Spacing):
            return value
        if isinstance(value, (int, float)):
            return cls.iso(value)
        dx, dy, dz = value
        return cls(dx, dy, dz)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dz)

    @property
    def voxel_volume_ml(self) -> float:
        return self.dx * self.dy * self.dz / 1000.0

    def isclose(self, other: "Spacing", atol: float = 1e-6) -> bool:
        return all(abs(a - b) <= atol for a, b in zip(self.as_tuple(), other.as_tuple()))


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """A 3D grid of finite scalar samples.

    ``data`` is copied on construction and made read-only.
    """

    data: np.ndarray
    spacing: Spacing
    unit: Unit = Unit.SUV

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, order="C")
        if data.ndim != 3:
            raise ValueError(f"expected a 3D array, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"all dims must be positive, got {data.shape}")
        if not np.all(np.isfinite(data)):
            bad = int(np.flatnonzero(~np.isfinite(data))[0])
            raise ValueError(f"non-finite sample at voxel {tuple(int(i) for i in np.unravel_index(bad, data.shape))}")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", Spacing.of(self.spacing))
        object.__setattr__(self, "unit", Unit(self.unit))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def voxel_volume_ml(self) -> float:
        return self.spacing.voxel_volume_ml

    def with_data(self, data: np.ndarray, unit: Unit | None = None) -> "ScalarVolume":
        return ScalarVolume(data, self.spacing, self.unit if unit is None else unit)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Foreground/background grid. Any nonzero input value is foreground."""

    data: np.ndarray
    spacing: Spacing

    def __post_init__(self):
        data = np.array(self.data, order="C") != 0
        if data.ndim != 3:
            raise ValueError(f"expected a 3D array, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"all dims must be positive, got {data.shape}")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", Spacing.of(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def voxel_volume_ml(self) -> float:
        return self.spacing.voxel_volume_ml

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))

    @property
    def volume_ml(self) -> float:
        return self.count * self.voxel_volume_ml

    @classmethod
    def empty(cls, dims: Sequence[int], spacing) -> "BinaryMask":
        return cls(np.zeros(tuple(dims), dtype=bool), spacing)

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing.isclose(other.spacing)
            and bool(np.array_equal(self.data, other.data))
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class LabeledComponents:
    """Connected components of a mask.

    ``labels`` holds 0 for background and 1..count for components.
    ``voxel_lists[l - 1]`` is the sorted array of linear indices of component ``l``.
    """

    labels: np.ndarray
    count: int
    spacing: Spacing
    connectivity: int = DEFAULT_CONNECTIVITY
    voxel_lists: tuple[np.ndarray, ...] = field(default=(), repr=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape  # type: ignore[return-value]

    @property
    def voxel_volume_ml(self) -> float:
        return self.spacing.voxel_volume_ml

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(v) for v in self.voxel_lists], dtype=np.int64)

    @property
    def mask(self) -> BinaryMask:
        return BinaryMask(self.labels > 0, self.spacing)

    def component(self, label: int) -> np.ndarray:
        if not 1 <= label <= self.count:
            raise IndexError(f"component label {label} out of range 1..{self.count}")
        return self.voxel_lists[label - 1]


def check_geometry(*grids) -> None:
    """Raise GeometryError unless all grids share dims and spacing."""
    first = grids[0]
    for other in grids[1:]:
        if tuple(first.dims) != tuple(other.dims):
            raise GeometryError(f"dims differ: {tuple(first.dims)} vs {tuple(other.dims)}")
        if not first.spacing.isclose(other.spacing):
            raise GeometryError(
                f"spacing differs: {first.spacing.as_tuple()} vs {other.spacing.as_tuple()}"
            )


_STRUCTURE_RANK = {6: 1, 18: 2, 26: 3}


def structuring_element(connectivity: int) -> np.ndarray:
    try:
        rank = _STRUCTURE_RANK[int(connectivity)]
    except KeyError:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity!r}") from None
    return ndimage.generate_binary_structure(3, rank)


def _voxel_lists(labels: np.ndarray, count: int) -> tuple[np.ndarray, ...]:
    flat = labels.ravel()
    fg = np.flatnonzero(flat)
    if count == 0:
        return ()
    lab = flat[fg]
    order = np.argsort(lab, kind="stable")
    sorted_idx = fg[order]
    bounds = np.searchsorted(lab[order], np.arange(1, count + 2))
    lists = []
    for l in range(count):
        arr = sorted_idx[bounds[l]:bounds[l + 1]]
        lists.append(_frozen(arr.astype(np.int64)))
    return tuple(lists)


def connected_components(mask: BinaryMask, connectivity: int = DEFAULT_CONNECTIVITY) -> LabeledComponents:
    """Label maximal connected foreground components.

    Labels are assigned in ascending order of each component's smallest
    linear voxel index (raster-scan order).
    """
    structure = structuring_element(connectivity)
    labels, count = ndimage.label(mask.data, structure=structure)
    labels = labels.astype(np.int32, copy=False)
    # ndimage numbers components in raster order already; renumber defensively
    # so the documented ordering never depends on that implementation detail.
    if count > 1:
        flat = labels.ravel()
        fg = np.flatnonzero(flat)
        _, first = np.unique(flat[fg], return_index=True)
        firsts = fg[first]
        old_labels = flat[firsts]
        ranking = np.argsort(firsts, kind="stable")
        if not np.array_equal(old_labels[ranking], np.arange(1, count + 1)):
            remap = np.zeros(count + 1, dtype=np.int32)
            remap[old_labels[ranking]] = np.arange(1, count + 1, dtype=np.int32)
            labels = remap[labels]
    return LabeledComponents(
        labels=_frozen(np.ascontiguousarray(labels)),
        count=int(count),
        spacing=mask.spacing,
        connectivity=int(connectivity),
        voxel_lists=_voxel_lists(labels, int(count)),
    )


def _output_dims(dims, spacing: Spacing, target: Spacing) -> tuple[int, int, int]:
    out = []
    for n, s, t in zip(dims, spacing.as_tuple(), target.as_tuple()):
        out.append(max(1, math.ceil(n * s / t - _CEIL_EPS)))
    return tuple(out)  # type: ignore[return-value]


def _source_coords(n_in: int, s_in: float, n_out: int, s_out: float) -> np.ndarray:
    """Continuous input index of each output voxel center, clamped to the grid."""
    centers_mm = (np.arange(n_out) + 0.5) * s_out
    u = centers_mm / s_in - 0.5
    return np.clip(u, 0.0, n_in - 1)


def _resample_array(
    data: np.ndarray,
    spacing: Spacing,
    target: Spacing,
    mode: ResampleMode,
    out_dims: tuple[int, int, int] | None = None,
) -> np.ndarray:
    if out_dims is None:
        out_dims = _output_dims(data.shape, spacing, target)
    result = data
    for axis, (n_in, s_in, n_out, s_out) in enumerate(
        zip(data.shape, spacing.as_tuple(), out_dims, target.as_tuple())
    ):
        if n_in == n_out and abs(s_in - s_out) <= 1e-12:
            continue
        u = _source_coords(n_in, s_in, n_out, s_out)
        if mode is ResampleMode.NEAREST:
            idx = np.minimum(np.floor(u + 0.5).astype(np.int64), n_in - 1)
            result = np.take(result, idx, axis=axis)
        else:
            lo = np.floor(u).astype(np.int64)
            hi = np.minimum(lo + 1, n_in - 1)
            w = u - lo
            shape = [1, 1, 1]
            shape[axis] = n_out
            w = w.reshape(shape)
            result = np.take(result, lo, axis=axis) * (1.0 - w) + np.take(result, hi, axis=axis) * w
    return result


def resample(vol, target, mode: ResampleMode | str = ResampleMode.TRILINEAR):
    """Resample onto a grid with ``target`` spacing covering the same extent.

    Output dims are ``ceil(n * spacing / target)`` per axis; samples are taken
    at output voxel centers, and positions beyond the outermost input centers
    clamp to the edge sample. Masks only accept NEAREST.
    """
    mode = ResampleMode(mode)
    target = Spacing.of(target)
    if isinstance(vol, BinaryMask):
        if mode is not ResampleMode.NEAREST:
            raise TypeError("binary masks can only be resampled with nearest-neighbour interpolation")
        return resample_mask(vol, target)
    data = _resample_array(vol.data, vol.spacing, target, mode)
    return ScalarVolume(data, target, vol.unit)


def resample_mask(mask: BinaryMask, target) -> BinaryMask:
    target = Spacing.of(target)
    data = _resample_array(mask.data, mask.spacing, target, ResampleMode.NEAREST)
    return BinaryMask(data, target)


def resample_to_grid(grid, dims: Sequence[int], target, mode: ResampleMode | str = ResampleMode.NEAREST):
    """Resample onto an explicit grid sharing the same origin corner.

    Used to bring a prediction onto its ground truth's voxel grid.
    """
    mode = ResampleMode(mode)
    target = Spacing.of(target)
    dims = tuple(int(n) for n in dims)
    if isinstance(grid, BinaryMask):
        if mode is not ResampleMode.NEAREST:
            raise TypeError("binary masks can only be resampled with nearest-neighbour interpolation")
        return BinaryMask(_resample_array(grid.data, grid.spacing, target, mode, dims), target)
    return ScalarVolume(_resample_array(grid.data, grid.spacing, target, mode, dims), target, grid.unit)


def clip_normalize_ct(ct: ScalarVolume, lo_hu: float = CT_CLIP_HU[0], hi_hu: float = CT_CLIP_HU[1]) -> ScalarVolume:
    """Clamp HU to ``[lo_hu, hi_hu]`` and min-max scale to ``[0, 1]``."""
    if ct.unit is not Unit.HU:
        raise ValueError(f"expected a CT volume in HU, got {ct.unit.value}")
    if not lo_hu < hi_hu:
        raise ValueError(f"clip range must satisfy lo < hi, got [{lo_hu}, {hi_hu}]")
    scaled = (np.clip(ct.data, lo_hu, hi_hu) - lo_hu) / (hi_hu - lo_hu)
    return ct.with_data(scaled, Unit.NORMALIZED)


Box = tuple[tuple[int, int, int], tuple[int, int, int]]


def body_bounding_box(pet: ScalarVolume, threshold: float = BODY_SUV_THRESHOLD) -> Box:
    """Inclusive voxel box around the largest 26-connected region with SUV > threshold.

    Size ties go to the component with the smaller label.
    """
    if pet.unit is not Unit.SUV:
        raise ValueError(f"expected a PET volume in SUV, got {pet.unit.value}")
    body = BinaryMask(pet.data > threshold, pet.spacing)
    cc = connected_components(body, 26)
    if cc.count == 0:
        raise NoBodyFoundError(f"no voxel exceeds SUV {threshold}")
    largest = int(np.argmax(cc.sizes)) + 1
    coords = np.unravel_index(cc.component(largest), cc.dims)
    lo = tuple(int(c.min()) for c in coords)
    hi = tuple(int(c.max()) for c in coords)
    return lo, hi  # type: ignore[return-value]


def crop(grid, box: Box):
    (x0, y0, z0), (x1, y1, z1) = box
    window = grid.data[x0:x1 + 1, y0:y1 + 1, z0:z1 + 1]
    if isinstance(grid, BinaryMask):
        return BinaryMask(window, grid.spacing)
    return grid.with_data(window)


@dataclass(frozen=True)
class SuvConversionParams:
    injected_dose_bq: float
    body_weight_g: float
    delay_min: float
    half_life_min: float = F18_HALF_LIFE_MIN

    def __post_init__(self):
        for name in ("injected_dose_bq", "body_weight_g", "delay_min", "half_life_min"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                # a zero delay is a legitimate scan-at-injection idealisation
                if name == "delay_min" and value == 0:
                    continue
                raise ValueError(f"{name} must be strictly positive, got {value!r}")

    @property
    def decayed_dose_bq(self) -> float:
        return self.injected_dose_bq * 2.0 ** (-self.delay_min / self.half_life_min)


def suv_from_activity(act: ScalarVolume, params: SuvConversionParams) -> ScalarVolume:
    """Body-weight SUV with the injected dose decay-corrected to scan time."""
    if act.unit is not Unit.BQ_PER_ML:
        raise ValueError(f"expected activity in Bq/ml, got {act.unit.value}")
    return act.with_data(act.data * (params.body_weight_g / params.decayed_dose_bq), Unit.SUV)


def sample_patch_centers(
    mask: BinaryMask,
    pos: int,
    neg: int,
    n_patches: int,
    patch_edge: int,
    seed: int,
) -> list[tuple[int, int, int]]:
    """Draw patch centers: a lesion voxel with probability pos/(pos+neg), else background.

    Voxels are drawn uniformly within their class. When one class is empty
    every center comes from the other.
    """
    if pos < 0 or neg < 0 or pos + neg <= 0:
        raise ValueError(f"need pos >= 0, neg >= 0 and pos + neg > 0, got pos={pos}, neg={neg}")
    if n_patches < 0:
        raise ValueError("n_patches must be non-negative")
    if any(patch_edge > n for n in mask.dims):
        raise ValueError(f"patch edge {patch_edge} exceeds volume dims {mask.dims}")
    flat = mask.data.ravel()
    fg = np.flatnonzero(flat)
    bg = np.flatnonzero(~flat)
    if fg.size == 0 and pos > 0 and neg == 0:
        raise ValueError("mask has no foreground but only foreground-centred patches were requested")

    rng = np.random.default_rng(seed)
    from_fg = rng.random(n_patches) < pos / (pos + neg)
    if fg.size == 0:
        from_fg[:] = False
    elif bg.size == 0:
        from_fg[:] = True
    n_fg = int(np.count_nonzero(from_fg))
    linear = np.empty(n_patches, dtype=np.int64)
    if n_fg:
        linear[from_fg] = fg[rng.integers(0, fg.size, size=n_fg)]
    if n_patches - n_fg:
        linear[~from_fg] = bg[rng.integers(0, bg.size, size=n_patches - n_fg)]
    coords = np.unravel_index(linear, mask.dims)
    return [tuple(int(c[i]) for c in coords) for i in range(n_patches)]  # type: ignore[misc]


def ellipsoid_mask(dims: Iterable[int], spacing: Spacing, center_mm, radii_mm) -> np.ndarray:
    """Boolean array of voxels whose centers lie inside an axis-aligned ellipsoid."""
    dims = tuple(dims)
    axes = [
        ((np.arange(n) + 0.5) * s - c) / r
        for n, s, c, r in zip(dims, spacing.as_tuple(), center_mm, radii_mm)
    ]
    gx, gy, gz = np.meshgrid(*[a * a for a in axes], indexing="ij", sparse=True)
    return (gx + gy + gz) <= 1.0
