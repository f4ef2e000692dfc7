"""Instance segmentation metrics: AJI, foreground Dice and object-level F1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MetricReport:
    aji: float
    dice: float
    f1_obj: float
    tp: int
    fp: int
    fn: int


def _check_dims(gt: np.ndarray, pred: np.ndarray) -> None:
    if gt.shape != pred.shape:
        raise ValueError(f"label map shapes differ: {gt.shape} vs {pred.shape}")


def _intersection_table(gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """(n_gt+1, n_pred+1) pixel-overlap counts, index 0 = background."""
    n_gt = int(gt.max())
    n_pred = int(pred.max())
    joint = gt.astype(np.int64).ravel() * (n_pred + 1) + pred.astype(np.int64).ravel()
    counts = np.bincount(joint, minlength=(n_gt + 1) * (n_pred + 1))
    return counts.reshape(n_gt + 1, n_pred + 1)


def aji(gt: np.ndarray, pred: np.ndarray) -> float:
    """Aggregated Jaccard index.

    Each ground-truth instance claims the predicted instance of maximum IoU
    (ties toward the lowest predicted label); intersections and unions
    accumulate over those claims and every never-claimed predicted instance
    adds its full area to the denominator.
    """
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    _check_dims(gt, pred)
    n_gt = int(gt.max())
    n_pred = int(pred.max())
    if n_gt == 0:
        return 1.0 if n_pred == 0 else 0.0
    inter = _intersection_table(gt, pred)[1:, 1:]
    gt_areas = np.bincount(gt.ravel(), minlength=n_gt + 1)[1:]
    pred_areas = np.bincount(pred.ravel(), minlength=n_pred + 1)[1:]
    num = 0.0
    den = 0.0
    used = np.zeros(n_pred, dtype=bool)
    for i in range(n_gt):
        if n_pred == 0:
            den += float(gt_areas[i])
            continue
        union = gt_areas[i] + pred_areas - inter[i]
        iou = inter[i] / union
        j = int(np.argmax(iou))  # argmax keeps the lowest label on ties
        num += float(inter[i, j])
        den += float(union[j])
        used[j] = True
    den += float(pred_areas[~used].sum())
    return num / den if den > 0 else 1.0


def dice_metric(gt: np.ndarray, pred: np.ndarray) -> float:
    """Binary foreground Dice; 1.0 when both foregrounds are empty."""
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    _check_dims(gt, pred)
    g = gt > 0
    s = pred > 0
    total = int(g.sum()) + int(s.sum())
    if total == 0:
        return 1.0
    return 2.0 * float((g & s).sum()) / total


def f1_obj(gt: np.ndarray, pred: np.ndarray, iou_thresh: float = 0.5) -> tuple[float, int, int, int]:
    """Object-level F1 with greedy one-to-one matching in descending IoU order.

    Returns (f1, tp, fp, fn); a pair counts as a true positive iff its IoU
    reaches ``iou_thresh``.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must be in (0, 1)")
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    _check_dims(gt, pred)
    n_gt = int(gt.max())
    n_pred = int(pred.max())
    if n_gt == 0 and n_pred == 0:
        return 1.0, 0, 0, 0
    tp = 0
    if n_gt and n_pred:
        inter = _intersection_table(gt, pred)[1:, 1:]
        gt_areas = np.bincount(gt.ravel(), minlength=n_gt + 1)[1:]
        pred_areas = np.bincount(pred.ravel(), minlength=n_pred + 1)[1:]
        union = gt_areas[:, None] + pred_areas[None, :] - inter
        iou = inter / union
        cands = [
            (float(iou[i, j]), i, j)
            for i in range(n_gt)
            for j in range(n_pred)
            if iou[i, j] >= iou_thresh
        ]
        cands.sort(key=lambda t: (-t[0], t[1], t[2]))
        used_gt = np.zeros(n_gt, dtype=bool)
        used_pred = np.zeros(n_pred, dtype=bool)
        for _, i, j in cands:
            if not used_gt[i] and not used_pred[j]:
                used_gt[i] = True
                used_pred[j] = True
                tp += 1
    fp = n_pred - tp
    fn = n_gt - tp
    f1 = 2.0 * tp / (2.0 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 1.0
    return f1, tp, fp, fn


def report(gt: np.ndarray, pred: np.ndarray, iou_thresh: float = 0.5) -> MetricReport:
    f1, tp, fp, fn = f1_obj(gt, pred, iou_thresh)
    return MetricReport(
        aji=aji(gt, pred), dice=dice_metric(gt, pred), f1_obj=f1, tp=tp, fp=fp, fn=fn
    )
