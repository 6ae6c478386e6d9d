"""Segmentation and detection scores: region J, boundary F, mAP at IoU 0.5."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, EmptyInput, LengthMismatch

N_THRESHOLDS = 21
CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class EvalReport:
    j: float
    f: float
    map50: float
    threshold: float

    def to_dict(self) -> dict:
        return asdict(self)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def j_score(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels removed by a 4-neighbourhood erosion (image border counts as outside)."""
    return mask & ~ndimage.binary_erosion(mask, structure=CROSS, border_value=0)


def default_tolerance(shape) -> float:
    return 0.008 * float(np.hypot(*shape[:2]))


def _matched_fraction(src: np.ndarray, dst: np.ndarray, tol: float) -> float:
    dist = ndimage.distance_transform_edt(~dst)
    return float((dist[src] <= tol).mean())


def f_score(pred, gt, tol: float | None = None) -> float:
    pred, gt = _pair(pred, gt)
    tol = default_tolerance(pred.shape) if tol is None else tol
    bp, bg = boundary(pred), boundary(gt)
    if not bp.any() and not bg.any():
        return 1.0
    if not bp.any() or not bg.any():
        return 0.0
    precision = _matched_fraction(bp, bg, tol)
    recall = _matched_fraction(bg, bp, tol)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _box_tuple(b) -> tuple[float, float, float, float]:
    if hasattr(b, "as_tuple"):
        return b.as_tuple()
    cu, cv, w, h = (float(x) for x in b)
    return cu, cv, w, h


def box_iou(a, b) -> float:
    au, av, aw, ah = _box_tuple(a)
    bu, bv, bw, bh = _box_tuple(b)
    ix = max(0.0, min(au + aw / 2, bu + bw / 2) - max(au - aw / 2, bu - bw / 2))
    iy = max(0.0, min(av + ah / 2, bv + bh / 2) - max(av - ah / 2, bv - bh / 2))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def map50(pred_boxes: Sequence, gt_boxes: Sequence) -> float:
    """Fraction of frames whose predicted box has IoU > 0.5 with the ground truth."""
    if len(pred_boxes) != len(gt_boxes):
        raise LengthMismatch(f"{len(pred_boxes)} predictions vs {len(gt_boxes)} ground-truth boxes")
    if not pred_boxes:
        raise EmptyInput("no boxes")
    return float(np.mean([box_iou(p, g) > 0.5 for p, g in zip(pred_boxes, gt_boxes)]))


def thresholds() -> np.ndarray:
    return np.arange(N_THRESHOLDS) / (N_THRESHOLDS - 1)


def threshold_search(prob_masks: Sequence, gts: Sequence) -> tuple[float, float]:
    """Line search over thresholds 0, 0.05, ..., 1 for the best mean J.

    A pixel is foreground when its probability is >= the threshold. Ties go
    to the smallest threshold.
    """
    if len(prob_masks) != len(gts):
        raise LengthMismatch(f"{len(prob_masks)} masks vs {len(gts)} ground truths")
    if not prob_masks:
        raise EmptyInput("no masks")
    best_t, best_j = 0.0, -1.0
    for t in thresholds():
        j = float(np.mean([j_score(np.asarray(p) >= t, g) for p, g in zip(prob_masks, gts)]))
        if j > best_j:
            best_t, best_j = float(t), j
    return best_t, best_j


def evaluate(prob_masks, gt_masks, pred_boxes, gt_boxes, tol: float | None = None) -> EvalReport:
    t, j = threshold_search(prob_masks, gt_masks)
    f = float(np.mean([f_score(np.asarray(p) >= t, g, tol) for p, g in zip(prob_masks, gt_masks)]))
    return EvalReport(j=j, f=f, map50=map50(pred_boxes, gt_boxes), threshold=t)
