"""Observer agreement: voxel-wise Fleiss' kappa, pairwise DSC, STAPLE consensus."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .metrics import dsc
from .volume import BinaryMask, Box, check_geometry, crop

__all__ = [
    "RaterStack",
    "KappaBand",
    "KappaResult",
    "kappa_band",
    "fleiss_kappa",
    "kappa_mean",
    "pairwise_dsc",
    "StapleResult",
    "staple",
]


@dataclass(frozen=True, eq=False)
class RaterStack:
    """Binary masks of the same image from two or more observers."""

    masks: tuple[BinaryMask, ...]

    def __post_init__(self):
        masks = tuple(self.masks)
        if len(masks) < 2:
            raise ValueError(f"need at least two raters, got {len(masks)}")
        check_geometry(*masks)
        object.__setattr__(self, "masks", masks)

    @property
    def n_obs(self) -> int:
        return len(self.masks)

    @property
    def n_voxels(self) -> int:
        return self.masks[0].data.size

    def votes(self) -> np.ndarray:
        """Per-voxel count of raters labelling the voxel foreground (flattened)."""
        votes = np.zeros(self.n_voxels, dtype=np.int64)
        for m in self.masks:
            votes += m.data.ravel()
        return votes

    def cropped(self, box: Box) -> "RaterStack":
        return RaterStack(tuple(crop(m, box) for m in self.masks))


class KappaBand(str, Enum):
    NONE = "none"
    SLIGHT = "slight"
    FAIR = "fair"
    MODERATE = "moderate"
    SUBSTANTIAL = "substantial"
    ALMOST_PERFECT = "almost perfect"


def kappa_band(kappa: float) -> KappaBand:
    """Qualitative agreement band; each band's upper edge is inclusive."""
    if kappa < 0:
        return KappaBand.NONE
    for upper, band in ((0.20, KappaBand.SLIGHT), (0.40, KappaBand.FAIR),
                        (0.60, KappaBand.MODERATE), (0.80, KappaBand.SUBSTANTIAL)):
        if kappa <= upper:
            return band
    return KappaBand.ALMOST_PERFECT


@dataclass(frozen=True)
class KappaResult:
    kappa: float
    p_bar: float
    p_e: float
    band: KappaBand
    degenerate: bool = False


def fleiss_kappa(stack: RaterStack, box: Box | None = None) -> KappaResult:
    """Fleiss' kappa with every voxel as a subject and two labels.

    ``box`` restricts the subjects to an inclusive voxel box (e.g. the body).
    When chance agreement is 1 (every rater labels every voxel the same single
    label) kappa is reported as 1.0 with ``degenerate=True``.
    """
    if box is not None:
        stack = stack.cropped(box)
    n = stack.n_obs
    m = stack.n_voxels
    fg = stack.votes().astype(np.float64)
    bg = n - fg
    p_bar = (float(np.sum(fg * fg + bg * bg)) - m * n) / (m * n * (n - 1))
    p_e = (float(fg.sum()) ** 2 + float(bg.sum()) ** 2) / (m * m * n * n)
    if p_e >= 1.0:
        return KappaResult(1.0, p_bar, p_e, KappaBand.ALMOST_PERFECT, degenerate=True)
    kappa = (p_bar - p_e) / (1.0 - p_e)
    return KappaResult(kappa, p_bar, p_e, kappa_band(kappa))


def kappa_mean(stacks: Sequence[RaterStack], box: Box | None = None) -> float:
    if not stacks:
        raise ValueError("kappa_mean needs at least one case")
    return float(np.mean([fleiss_kappa(s, box).kappa for s in stacks]))


def pairwise_dsc(stack: RaterStack) -> np.ndarray:
    n = stack.n_obs
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = dsc(stack.masks[i], stack.masks[j])
    return out


@dataclass(frozen=True, eq=False)
class StapleResult:
    consensus: BinaryMask
    probability: np.ndarray
    sensitivity: np.ndarray
    specificity: np.ndarray
    iterations: int
    converged: bool


STAPLE_CLAMP = (0.01, 0.99)
STAPLE_INIT = 0.9999


def staple(stack: RaterStack, max_iter: int = 100, tol: float = 1e-6) -> StapleResult:
    """Binary STAPLE by expectation-maximisation.

    The per-voxel prior is the mean rater vote. Rater sensitivity and
    specificity start at 0.9999 and are clamped to [0.01, 0.99] before every
    E-step. Iteration stops once no voxel's foreground probability moves by
    ``tol`` or more, or after ``max_iter`` E-steps. The consensus keeps voxels
    with probability >= 0.5.
    """
    lo, hi = STAPLE_CLAMP
    decisions = np.stack([m.data.ravel() for m in stack.masks]).astype(bool)
    prior = decisions.mean(axis=0)
    n_obs = stack.n_obs
    sens = np.full(n_obs, STAPLE_INIT)
    spec = np.full(n_obs, STAPLE_INIT)
    weights = prior.copy()
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        sens = np.clip(sens, lo, hi)
        spec = np.clip(spec, lo, hi)
        # E-step, in log space so many raters cannot underflow
        log_a = np.log(prior, where=prior > 0, out=np.full_like(prior, -np.inf))
        log_b = np.log1p(-prior, where=prior < 1, out=np.full_like(prior, -np.inf))
        for j in range(n_obs):
            d = decisions[j]
            log_a += np.where(d, np.log(sens[j]), np.log1p(-sens[j]))
            log_b += np.where(d, np.log1p(-spec[j]), np.log(spec[j]))
        with np.errstate(over="ignore"):
            new = 1.0 / (1.0 + np.exp(log_b - log_a))
        change = float(np.max(np.abs(new - weights))) if new.size else 0.0
        weights = new
        # M-step
        w_fg = weights.sum()
        w_bg = (1.0 - weights).sum()
        for j in range(n_obs):
            d = decisions[j]
            if w_fg > 0:
                sens[j] = float(weights[d].sum()) / w_fg
            if w_bg > 0:
                spec[j] = float((1.0 - weights[~d]).sum()) / w_bg
        if change < tol:
            converged = True
            break
    sens = np.clip(sens, lo, hi)
    spec = np.clip(spec, lo, hi)
    if not converged:
        warnings.warn(f"STAPLE did not converge in {max_iter} iterations", RuntimeWarning, stacklevel=2)
    dims = stack.masks[0].dims
    prob = weights.reshape(dims)
    return StapleResult(
        consensus=BinaryMask(prob >= 0.5, stack.masks[0].spacing),
        probability=prob,
        sensitivity=sens,
        specificity=spec,
        iterations=iterations,
        converged=converged,
    )
