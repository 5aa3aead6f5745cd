"""Synthetic PET phantoms with known lesion geometry, and mask degradations.

Lesions are axis-aligned ellipsoids with a noiseless SUV plateau; a voxel
belongs to a lesion when its center lies inside the ellipsoid. Background is
``background_suv`` plus Gaussian noise, clipped at 0.

The ground-truth measures returned by :func:`generate` are computed without
going through :mod:`lesioneval.measures`, so the two can check each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .measures import LesionMeasures
from .volume import (
    DEFAULT_CONNECTIVITY,
    BinaryMask,
    ScalarVolume,
    Spacing,
    Unit,
    connected_components,
    ellipsoid_mask,
    structuring_element,
)

__all__ = [
    "LesionSpec",
    "PhantomSpec",
    "Phantom",
    "generate",
    "random_spec",
    "Dilate",
    "Erode",
    "DropComponent",
    "AddBlob",
    "Shift",
    "parse_op",
    "degrade",
]


@dataclass(frozen=True)
class LesionSpec:
    center_mm: tuple[float, float, float]
    radii_mm: tuple[float, float, float]
    suv: float

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "LesionSpec":
        radii = d["radii_mm"] if "radii_mm" in d else d["radius_mm"]
        if isinstance(radii, (int, float)):
            radii = [radii] * 3
        if len(radii) != 3 or len(d["center_mm"]) != 3:
            raise ValueError(f"lesion center and radii need 3 components, got {dict(d)}")
        return cls(tuple(map(float, d["center_mm"])), tuple(map(float, radii)), float(d["suv"]))


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    spacing: Spacing
    background_suv: float = 1.0
    noise_sd: float = 0.0
    lesions: tuple[LesionSpec, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "spacing", Spacing.of(self.spacing))
        object.__setattr__(self, "lesions", tuple(self.lesions))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        for lesion in self.lesions:
            if lesion.suv <= self.background_suv:
                raise ValueError(f"lesion SUV {lesion.suv} must exceed background {self.background_suv}")
            if min(lesion.radii_mm) <= 0:
                raise ValueError(f"lesion radii must be positive, got {lesion.radii_mm}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PhantomSpec":
        return cls(
            dims=tuple(d["dims"]),
            spacing=Spacing.of(d.get("spacing", 2.0)),
            background_suv=float(d.get("background_suv", 1.0)),
            noise_sd=float(d.get("noise_sd", 0.0)),
            lesions=tuple(LesionSpec.from_dict(l) for l in d.get("lesions", ())),
            seed=int(d.get("seed", 0)),
        )

    @property
    def extent_mm(self) -> np.ndarray:
        return np.asarray(self.dims) * np.asarray(self.spacing.as_tuple())


@dataclass(frozen=True, eq=False)
class Phantom:
    suv: ScalarVolume
    gt: BinaryMask
    truth: LesionMeasures
    lesion_masks: tuple[np.ndarray, ...] = field(default=(), repr=False)


def _boundary(mask: np.ndarray) -> np.ndarray:
    inner = ndimage.binary_erosion(mask, structure=structuring_element(6), border_value=0)
    return mask & ~inner


def _farthest_boundary_pair_mm(mask: np.ndarray, spacing: Spacing) -> float:
    pts = (np.argwhere(_boundary(mask)) + 0.5) * np.asarray(spacing.as_tuple())
    best = 0.0
    for i in range(0, len(pts), 1024):
        d = pts[i:i + 1024, None, :] - pts[None, :, :]
        best = max(best, float(np.einsum("ijk,ijk->ij", d, d).max(initial=0.0)))
    return float(np.sqrt(best))


def _count_groups(masks: Sequence[np.ndarray], connectivity: int) -> int:
    """Number of lesion groups after merging lesions that overlap or touch."""
    nonempty = [m for m in masks if m.any()]
    parent = list(range(len(nonempty)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    structure = structuring_element(connectivity)
    grown = [ndimage.binary_dilation(m, structure=structure) for m in nonempty]
    for i in range(len(nonempty)):
        for j in range(i + 1, len(nonempty)):
            if (grown[i] & nonempty[j]).any():
                parent[find(i)] = find(j)
    return len({find(i) for i in range(len(nonempty))})


def generate(spec: PhantomSpec, connectivity: int = DEFAULT_CONNECTIVITY) -> Phantom:
    """Render a phantom and its ground-truth lesion measures."""
    extent = spec.extent_mm
    for lesion in spec.lesions:
        c = np.asarray(lesion.center_mm)
        r = np.asarray(lesion.radii_mm)
        if np.any(c - r < 0) or np.any(c + r > extent):
            raise ValueError(f"lesion at {lesion.center_mm} mm with radii {lesion.radii_mm} leaves the volume")

    rng = np.random.default_rng(spec.seed)
    suv = np.full(spec.dims, spec.background_suv, dtype=np.float64)
    if spec.noise_sd > 0:
        suv += rng.normal(0.0, spec.noise_sd, size=spec.dims)
        np.maximum(suv, 0.0, out=suv)

    gt = np.zeros(spec.dims, dtype=bool)
    plateau = np.zeros(spec.dims, dtype=np.float64)
    masks = []
    for lesion in spec.lesions:
        m = ellipsoid_mask(spec.dims, spec.spacing, lesion.center_mm, lesion.radii_mm)
        masks.append(m)
        gt |= m
        np.maximum(plateau, np.where(m, lesion.suv, 0.0), out=plateau)
    suv[gt] = plateau[gt]

    v_ml = spec.spacing.voxel_volume_ml
    n_fg = int(gt.sum())
    if n_fg == 0:
        truth = LesionMeasures.zero()
    else:
        total = float(plateau[gt].sum())
        truth = LesionMeasures(
            suv_mean=total / n_fg,
            suv_max=max(l.suv for l, m in zip(spec.lesions, masks) if m.any()),
            n_lesions=_count_groups(masks, connectivity),
            tmtv_ml=n_fg * v_ml,
            tlg_ml=total * v_ml,
            dmax_cm=_farthest_boundary_pair_mm(gt, spec.spacing) / 10.0,
        )
    return Phantom(
        suv=ScalarVolume(suv, spec.spacing, Unit.SUV),
        gt=BinaryMask(gt, spec.spacing),
        truth=truth,
        lesion_masks=tuple(masks),
    )


def random_spec(
    seed: int,
    dims: Sequence[int] = (48, 48, 48),
    spacing=2.0,
    n_lesions: tuple[int, int] = (1, 5),
    radius_mm: tuple[float, float] = (3.0, 9.0),
    suv: tuple[float, float] = (3.0, 20.0),
    background_suv: float = 1.0,
    noise_sd: float = 0.2,
    gap_mm: float = 4.0,
    max_tries: int = 500,
) -> PhantomSpec:
    """Random phantom with lesions kept ``gap_mm`` apart (surface to surface, spherical bound)."""
    rng = np.random.default_rng(seed)
    spacing = Spacing.of(spacing)
    extent = np.asarray(dims) * np.asarray(spacing.as_tuple())
    target = int(rng.integers(n_lesions[0], n_lesions[1] + 1))
    placed: list[LesionSpec] = []
    for _ in range(max_tries):
        if len(placed) == target:
            break
        radii = rng.uniform(radius_mm[0], radius_mm[1], size=3)
        if np.any(2 * radii >= extent):
            continue
        center = rng.uniform(radii, extent - radii)
        bound = float(radii.max())
        if any(np.linalg.norm(center - np.asarray(p.center_mm)) < bound + max(p.radii_mm) + gap_mm
               for p in placed):
            continue
        placed.append(LesionSpec(tuple(center.tolist()), tuple(radii.tolist()),
                                 float(rng.uniform(*suv))))
    return PhantomSpec(tuple(dims), spacing, background_suv, noise_sd, tuple(placed), seed)


# -- degradations ---------------------------------------------------------------


@dataclass(frozen=True)
class Dilate:
    k: int = 1


@dataclass(frozen=True)
class Erode:
    k: int = 1


@dataclass(frozen=True)
class DropComponent:
    index: int  # 1-based label in the current mask


@dataclass(frozen=True)
class AddBlob:
    radii_mm: tuple[float, float, float]
    center_mm: tuple[float, float, float] | None = None  # None: random placement


@dataclass(frozen=True)
class Shift:
    offset: tuple[int, int, int]


def parse_op(item: Mapping[str, Any]):
    """Build an op from a one-key mapping such as ``{"dilate": 1}``."""
    if len(item) != 1:
        raise ValueError(f"each op must have exactly one key, got {dict(item)}")
    (name, arg), = item.items()
    name = name.lower()
    if name == "dilate":
        return Dilate(int(arg))
    if name == "erode":
        return Erode(int(arg))
    if name in ("drop", "drop_component"):
        return DropComponent(int(arg))
    if name == "shift":
        return Shift(tuple(int(v) for v in arg))
    if name in ("add_blob", "add"):
        if isinstance(arg, (int, float)):
            return AddBlob((float(arg),) * 3)
        radii = arg.get("radii_mm", [arg.get("radius_mm", 4.0)] * 3)
        center = arg.get("center_mm")
        return AddBlob(tuple(map(float, radii)), None if center is None else tuple(map(float, center)))
    raise ValueError(f"unknown degradation op {name!r}")


def _shift(data: np.ndarray, offset) -> np.ndarray:
    out = np.zeros_like(data)
    src, dst = [], []
    for n, o in zip(data.shape, offset):
        o = int(o)
        if abs(o) >= n:
            return out
        src.append(slice(max(0, -o), n - max(0, o)))
        dst.append(slice(max(0, o), n - max(0, -o)))
    out[tuple(dst)] = data[tuple(src)]
    return out


def _place_blob(data: np.ndarray, spacing: Spacing, op: AddBlob, rng, max_tries: int = 1000) -> np.ndarray:
    halo = ndimage.binary_dilation(data, structure=structuring_element(26)) if data.any() else data
    extent = np.asarray(data.shape) * np.asarray(spacing.as_tuple())
    radii = np.asarray(op.radii_mm)
    if op.center_mm is not None:
        centers = [np.asarray(op.center_mm)]
    else:
        if np.any(2 * radii > extent):
            raise ValueError(f"blob radii {op.radii_mm} do not fit in the volume")
        centers = (rng.uniform(radii, extent - radii) for _ in range(max_tries))
    for center in centers:
        blob = ellipsoid_mask(data.shape, spacing, center, radii)
        if blob.any() and not (blob & halo).any():
            return data | blob
    raise ValueError("could not add a blob without touching existing foreground")


def degrade(gt: BinaryMask, ops: Sequence, seed: int = 0, connectivity: int = DEFAULT_CONNECTIVITY) -> BinaryMask:
    """Apply degradation ops in order.

    Dilation and erosion use the 6-connected unit ball. Component indices refer
    to the labeling of the mask as it is when the op runs. Added blobs never
    touch existing foreground.
    """
    rng = np.random.default_rng(seed)
    data = gt.data.copy()
    ball = structuring_element(6)
    for op in ops:
        if isinstance(op, Mapping):
            op = parse_op(op)
        if isinstance(op, Dilate):
            if op.k > 0 and data.any():
                data = ndimage.binary_dilation(data, structure=ball, iterations=op.k)
        elif isinstance(op, Erode):
            if op.k > 0:
                data = ndimage.binary_erosion(data, structure=ball, iterations=op.k, border_value=0)
        elif isinstance(op, DropComponent):
            cc = connected_components(BinaryMask(data, gt.spacing), connectivity)
            if not 1 <= op.index <= cc.count:
                raise IndexError(f"cannot drop component {op.index}; mask has {cc.count}")
            data = data.copy()
            data.ravel()[cc.component(op.index)] = False
        elif isinstance(op, AddBlob):
            data = _place_blob(data, gt.spacing, op, rng)
        elif isinstance(op, Shift):
            data = _shift(data, op.offset)
        else:
            raise TypeError(f"unknown degradation op {op!r}")
    return BinaryMask(data, gt.spacing)
