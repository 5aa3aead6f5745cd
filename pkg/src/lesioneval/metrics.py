"""Voxel-level segmentation scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import (
    DEFAULT_CONNECTIVITY,
    BinaryMask,
    LabeledComponents,
    ScalarVolume,
    check_geometry,
    connected_components,
)

__all__ = ["SegScores", "dsc", "soft_dice_loss", "fpv", "fnv", "seg_scores"]


@dataclass(frozen=True)
class SegScores:
    dsc: float
    fpv_ml: float
    fnv_ml: float


def dsc(gt: BinaryMask, pred: BinaryMask) -> float:
    """Dice similarity coefficient. Two empty masks score 1.0, one empty mask 0.0."""
    check_geometry(gt, pred)
    n_gt = np.count_nonzero(gt.data)
    n_pred = np.count_nonzero(pred.data)
    if n_gt + n_pred == 0:
        return 1.0
    inter = np.count_nonzero(gt.data & pred.data)
    return 2.0 * inter / (n_gt + n_pred)


def soft_dice_loss(pred_probs: ScalarVolume, gt: BinaryMask, eps: float = 1e-5, eta: float = 1e-5) -> float:
    """Binary Dice loss on a single whole volume (one patch per batch)."""
    check_geometry(pred_probs, gt)
    p = pred_probs.data
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("predicted probabilities must lie in [0, 1]")
    g = gt.data.astype(np.float64)
    return 1.0 - (2.0 * float(np.sum(p * g)) + eps) / (float(np.sum(p) + np.sum(g)) + eta)


def _untouched_volume(cc: LabeledComponents, other: np.ndarray) -> float:
    # a component is untouched when none of its voxels is foreground in `other`
    if cc.count == 0:
        return 0.0
    hits = np.bincount(cc.labels.ravel(), weights=other.ravel(), minlength=cc.count + 1)[1:]
    sizes = cc.sizes
    return float(sizes[hits == 0].sum()) * cc.voxel_volume_ml


def fpv(gt: BinaryMask, pred_cc: LabeledComponents) -> float:
    """Volume (ml) of predicted components that share no voxel with the GT foreground."""
    check_geometry(gt, pred_cc)
    return _untouched_volume(pred_cc, gt.data)


def fnv(gt_cc: LabeledComponents, pred: BinaryMask) -> float:
    """Volume (ml) of GT components that share no voxel with the prediction."""
    check_geometry(gt_cc, pred)
    return _untouched_volume(gt_cc, pred.data)


def seg_scores(
    gt: BinaryMask,
    pred: BinaryMask,
    connectivity: int = DEFAULT_CONNECTIVITY,
    gt_cc: LabeledComponents | None = None,
    pred_cc: LabeledComponents | None = None,
) -> SegScores:
    if gt_cc is None:
        gt_cc = connected_components(gt, connectivity)
    if pred_cc is None:
        pred_cc = connected_components(pred, connectivity)
    return SegScores(dsc=dsc(gt, pred), fpv_ml=fpv(gt, pred_cc), fnv_ml=fnv(gt_cc, pred))
