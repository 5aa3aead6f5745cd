"""Per-lesion detection: IoU-maximising lesion matching and three TP criteria.

Criterion 1 counts a predicted lesion as TP when it touches any GT lesion.
Criteria 2 and 3 first pair GT and predicted lesions one-to-one so that the
total IoU is maximal, then judge each pair by IoU >= T (criterion 2) or by
whether the predicted lesion contains the GT lesion's hottest voxel
(criterion 3).

A GT lesion whose match fails the criterion is counted in ``fn`` alongside
unmatched GT lesions, which keeps ``tp + fn == n_gt``. The count of unmatched
GT lesions alone is kept as ``fn_strict``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as graph_components

from .volume import LabeledComponents, ScalarVolume, check_geometry

__all__ = [
    "Criterion",
    "MatchTable",
    "DetectionOutcome",
    "overlap_table",
    "match_lesions",
    "criterion1",
    "criterion2",
    "criterion3",
    "suvmax_voxels",
    "IOU_THRESHOLD",
]

IOU_THRESHOLD = 0.5
_TIE_TOL = 1e-9


class Criterion(str, Enum):
    C1 = "C1"
    C2 = "C2"
    C3 = "C3"


@dataclass(frozen=True)
class MatchTable:
    pairs: tuple[tuple[int, int, float], ...]
    unmatched_gt: tuple[int, ...]
    unmatched_pred: tuple[int, ...]
    n_gt: int = 0
    n_pred: int = 0

    @property
    def total_iou(self) -> float:
        return float(sum(iou for _, _, iou in self.pairs))


@dataclass(frozen=True)
class DetectionOutcome:
    criterion: Criterion
    tp: int
    fp: int
    fn: int
    n_gt: int
    n_pred: int
    fn_strict: int = 0
    sensitivity: float | None = None
    pairs: tuple = field(default=(), repr=False)

    @property
    def no_lesion(self) -> bool:
        """True when the GT has no lesions, so sensitivity is undefined."""
        return self.n_gt == 0


def overlap_table(gt_cc: LabeledComponents, pred_cc: LabeledComponents):
    """Sparse intersection counts between GT and predicted components.

    Returns ``(gt_labels, pred_labels, intersections, ious)``, one entry per
    overlapping pair, sorted by (gt_label, pred_label).
    """
    check_geometry(gt_cc, pred_cc)
    g = gt_cc.labels.ravel()
    p = pred_cc.labels.ravel()
    both = (g > 0) & (p > 0)
    if not both.any():
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty, np.zeros(0)
    code = g[both].astype(np.int64) * (pred_cc.count + 1) + p[both]
    codes, inter = np.unique(code, return_counts=True)
    gl = codes // (pred_cc.count + 1)
    pl = codes % (pred_cc.count + 1)
    union = gt_cc.sizes[gl - 1] + pred_cc.sizes[pl - 1] - inter
    return gl, pl, inter, inter / union


def _solve(weights: np.ndarray) -> tuple[float, dict[int, int]]:
    """Maximum-weight assignment; zero-weight assignments count as unmatched."""
    if weights.size == 0:
        return 0.0, {}
    rows, cols = linear_sum_assignment(weights, maximize=True)
    chosen = {int(r): int(c) for r, c in zip(rows, cols) if weights[r, c] > 0}
    return float(sum(weights[r, c] for r, c in chosen.items())), chosen


def _lexicographic_optimum(weights: np.ndarray) -> dict[int, int]:
    """Optimal assignment, ties broken lexicographically.

    Rows are fixed in ascending order; each row takes the smallest column that
    still allows the optimum, and stays unmatched only if no column does.
    """
    n_rows, n_cols = weights.shape
    target, current = _solve(weights)
    fixed: dict[int, int] = {}
    taken: set[int] = set()
    for row in range(n_rows):
        rest_rows = np.arange(row + 1, n_rows)
        options = [c for c in range(n_cols) if c not in taken and weights[row, c] > 0]
        options.append(-1)
        partner = current.get(row, -1)
        for option in options:
            if option == partner:
                break
            gain = weights[row, option] if option >= 0 else 0.0
            free = np.array([c for c in range(n_cols) if c not in taken and c != option], dtype=np.int64)
            sub = weights[np.ix_(rest_rows, free)]
            value, sub_assign = _solve(sub)
            if gain + value >= target - _TIE_TOL:
                partner = option
                current = {int(rest_rows[r]): int(free[c]) for r, c in sub_assign.items()}
                if option >= 0:
                    current[row] = option
                break
        if partner >= 0:
            fixed[row] = partner
            taken.add(partner)
            target -= weights[row, partner]
        current.pop(row, None)
    return fixed


def match_lesions(gt_cc: LabeledComponents, pred_cc: LabeledComponents) -> MatchTable:
    """One-to-one GT/prediction pairing maximising the summed IoU.

    Only overlapping pairs (IoU > 0) may be matched. Among equally good
    matchings the one that gives each GT label, in ascending order, the
    smallest available predicted label wins.
    """
    gl, pl, _, ious = overlap_table(gt_cc, pred_cc)
    pairs: list[tuple[int, int, float]] = []
    if gl.size:
        # independent sub-problems: connected pieces of the bipartite overlap graph
        n_g, n_p = gt_cc.count, pred_cc.count
        graph = coo_matrix((np.ones(gl.size), (gl - 1, n_g + pl - 1)), shape=(n_g + n_p,) * 2)
        _, piece = graph_components(graph, directed=False)
        piece_of_pair = piece[gl - 1]
        for pid in np.unique(piece_of_pair):
            sel = piece_of_pair == pid
            rows = np.unique(gl[sel])
            cols = np.unique(pl[sel])
            weights = np.zeros((rows.size, cols.size))
            weights[np.searchsorted(rows, gl[sel]), np.searchsorted(cols, pl[sel])] = ious[sel]
            for r, c in _lexicographic_optimum(weights).items():
                pairs.append((int(rows[r]), int(cols[c]), float(weights[r, c])))
    pairs.sort()
    matched_g = {g for g, _, _ in pairs}
    matched_p = {p for _, p, _ in pairs}
    return MatchTable(
        pairs=tuple(pairs),
        unmatched_gt=tuple(l for l in range(1, gt_cc.count + 1) if l not in matched_g),
        unmatched_pred=tuple(l for l in range(1, pred_cc.count + 1) if l not in matched_p),
        n_gt=gt_cc.count,
        n_pred=pred_cc.count,
    )


def _sensitivity(tp_gt: int, n_gt: int) -> float | None:
    return tp_gt / n_gt if n_gt else None


def criterion1(gt_cc: LabeledComponents, pred_cc: LabeledComponents) -> DetectionOutcome:
    """Any-overlap detection."""
    gl, pl, _, _ = overlap_table(gt_cc, pred_cc)
    tp = int(np.unique(pl).size)
    fn = gt_cc.count - int(np.unique(gl).size)
    return DetectionOutcome(
        criterion=Criterion.C1,
        tp=tp,
        fp=pred_cc.count - tp,
        fn=fn,
        fn_strict=fn,
        n_gt=gt_cc.count,
        n_pred=pred_cc.count,
        sensitivity=_sensitivity(gt_cc.count - fn, gt_cc.count),
    )


def _judge(criterion: Criterion, match: MatchTable, hits: list[bool]) -> DetectionOutcome:
    tp = sum(hits)
    misses = len(hits) - tp
    return DetectionOutcome(
        criterion=criterion,
        tp=tp,
        fp=len(match.unmatched_pred) + misses,
        fn=len(match.unmatched_gt) + misses,
        fn_strict=len(match.unmatched_gt),
        n_gt=match.n_gt,
        n_pred=match.n_pred,
        sensitivity=_sensitivity(tp, match.n_gt),
        pairs=tuple(zip(match.pairs, hits)),
    )


def criterion2(match: MatchTable, threshold: float = IOU_THRESHOLD) -> DetectionOutcome:
    """Matched pair is TP when IoU >= threshold (inclusive)."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1], got {threshold}")
    return _judge(Criterion.C2, match, [iou >= threshold for _, _, iou in match.pairs])


def suvmax_voxels(gt_cc: LabeledComponents, suv: ScalarVolume) -> np.ndarray:
    """Linear index of the hottest voxel of each GT lesion (smallest index on ties)."""
    check_geometry(gt_cc, suv)
    flat = suv.data.ravel()
    return np.array([v[np.argmax(flat[v])] for v in gt_cc.voxel_lists], dtype=np.int64)


def criterion3(
    match: MatchTable,
    gt_cc: LabeledComponents,
    pred_cc: LabeledComponents,
    suv: ScalarVolume,
) -> DetectionOutcome:
    """Matched pair is TP when the predicted lesion contains the GT lesion's SUVmax voxel."""
    check_geometry(gt_cc, pred_cc, suv)
    hottest = suvmax_voxels(gt_cc, suv)
    pred_flat = pred_cc.labels.ravel()
    hits = [bool(pred_flat[hottest[g - 1]] == p) for g, p, _ in match.pairs]
    return _judge(Criterion.C3, match, hits)
