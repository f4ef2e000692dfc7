"""Training objectives with analytic gradients.

Supervised stack: Dice + cross-entropy on the NP branch, MSE + masked mean
squared gradient error (MSGE) on the HV branch. Consistency stack: the
matching-driven (MIAC) and prior-driven (PIAC) instance-aware terms.

Gradients are always taken with respect to the student's predicted maps;
teacher maps, instance masks, matches and the PIAC weight map are constants.
Convention for the consistency feature map F (4, H, W): channels
[np_bg, np_fg, hv_h, hv_v]; the boundary map B is the np_fg channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import raster
from .matching import MatchResult

DICE_EPS = math.exp(-3.0)
CE_CLAMP = 1e-7

NP_FG_CHANNEL = 1  # index of the foreground probability inside np_probs and F


@dataclass(frozen=True)
class LossValue:
    value: float
    grad: np.ndarray


@dataclass(frozen=True)
class MiacValue:
    value: float
    grad_f: np.ndarray  # d value / d F_s, (K, H, W)
    grad_b: np.ndarray  # d value / d B_s, (H, W)


@dataclass(frozen=True)
class SupervisedValue:
    value: float
    grad_np: np.ndarray  # (2, H, W) w.r.t. the NP probabilities
    grad_hv: np.ndarray  # (2, H, W) w.r.t. the HV maps
    parts: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ConsistencyValue:
    value: float
    grad_f: np.ndarray
    grad_b: np.ndarray


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.5
    gamma1: float = 0.1
    gamma2: float = 100.0

    def __post_init__(self) -> None:
        if self.beta < 0 or self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("loss weights must be non-negative")


def dice_loss(pred: np.ndarray, gt: np.ndarray) -> LossValue:
    """Soft Dice loss 1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps) with
    eps = e^-3."""
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if pred.shape != y.shape:
        raise ValueError("pred and gt shapes differ")
    a = 2.0 * float((pred * y).sum()) + DICE_EPS
    b = float(pred.sum()) + float(y.sum()) + DICE_EPS
    grad = -(2.0 * y * b - a) / (b * b)
    return LossValue(value=1.0 - a / b, grad=grad)


def ce_loss(pred: np.ndarray, gt: np.ndarray) -> LossValue:
    """Two-class cross entropy averaged over pixels; probabilities are clamped
    to [1e-7, 1 - 1e-7] before the log."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 3 or pred.shape[0] != 2:
        raise ValueError("pred must have shape (2, H, W)")
    fg = np.asarray(gt) > 0
    onehot = np.stack([~fg, fg]).astype(np.float64)
    clamped = np.clip(pred, CE_CLAMP, 1.0 - CE_CLAMP)
    n = pred.shape[1] * pred.shape[2]
    value = float(-(onehot * np.log(clamped)).sum() / n)
    grad = -onehot / clamped / n
    grad[(pred < CE_CLAMP) | (pred > 1.0 - CE_CLAMP)] = 0.0
    return LossValue(value=value, grad=grad)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> LossValue:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("pred and target shapes differ")
    n = pred.size
    diff = pred - target
    return LossValue(value=float((diff**2).sum()) / n, grad=2.0 * diff / n)


def msge_loss(pred_hv: np.ndarray, gt_hv: np.ndarray, nuclear_mask: np.ndarray) -> LossValue:
    """Mean squared gradient error over nuclear pixels: the horizontal Sobel
    derivative of the horizontal channel and the vertical derivative of the
    vertical channel."""
    pred_hv = np.asarray(pred_hv, dtype=np.float64)
    gt_hv = np.asarray(gt_hv, dtype=np.float64)
    mask = np.asarray(nuclear_mask, dtype=bool)
    if pred_hv.shape != gt_hv.shape or pred_hv.ndim != 3 or pred_hv.shape[0] != 2:
        raise ValueError("pred_hv and gt_hv must both have shape (2, H, W)")
    m = int(mask.sum())
    if m == 0:
        return LossValue(value=0.0, grad=np.zeros_like(pred_hv))
    gx_p, _ = raster.sobel_gradients(pred_hv[0])
    _, gy_p = raster.sobel_gradients(pred_hv[1])
    gx_t, _ = raster.sobel_gradients(gt_hv[0])
    _, gy_t = raster.sobel_gradients(gt_hv[1])
    dx = (gx_p - gx_t) * mask
    dy = (gy_p - gy_t) * mask
    value = float((dx**2).sum() + (dy**2).sum()) / m
    grad = np.stack(
        [
            raster.sobel_adjoint(2.0 * dx / m, raster.SOBEL_X),
            raster.sobel_adjoint(2.0 * dy / m, raster.SOBEL_Y),
        ]
    )
    return LossValue(value=value, grad=grad)


def miac_loss(
    f_s: np.ndarray,
    f_t: np.ndarray,
    b_s: np.ndarray,
    b_t: np.ndarray,
    match: MatchResult,
    pair_masks: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]],
    beta: float = 0.5,
) -> MiacValue:
    """Matching-driven consistency over matched instance pairs.

    ``pair_masks`` holds one (student_mask, teacher_mask, student_boundary,
    teacher_boundary) tuple per entry of ``match.pairs``; all masks are
    detached constants. Gradients flow to the student maps only.
    """
    f_s = np.asarray(f_s, dtype=np.float64)
    f_t = np.asarray(f_t, dtype=np.float64)
    b_s = np.asarray(b_s, dtype=np.float64)
    b_t = np.asarray(b_t, dtype=np.float64)
    if len(pair_masks) != len(match.pairs):
        raise ValueError("pair_masks must align with match.pairs")
    n = len(match.pairs)
    grad_f = np.zeros_like(f_s)
    grad_b = np.zeros_like(b_s)
    if n == 0:
        return MiacValue(value=0.0, grad_f=grad_f, grad_b=grad_b)
    value = 0.0
    for s_mask, t_mask, s_bnd, t_bnd in pair_masks:
        diff_f = f_s * s_mask - f_t * t_mask
        value += float((diff_f**2).sum())
        grad_f += 2.0 * diff_f * s_mask
        diff_b = b_s * s_bnd - b_t * t_bnd
        value += beta * float((diff_b**2).sum())
        grad_b += 2.0 * beta * diff_b * s_bnd
    return MiacValue(value=value / n, grad_f=grad_f / n, grad_b=grad_b / n)


def piac_loss(f_s: np.ndarray, f_t: np.ndarray, u: np.ndarray, n_instances: int) -> LossValue:
    """Prior-driven consistency: || (F_s - F_t) * U ||^2 / max(N, 1), with the
    weight map U and the teacher maps treated as constants."""
    f_s = np.asarray(f_s, dtype=np.float64)
    f_t = np.asarray(f_t, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    denom = max(int(n_instances), 1)
    weighted = (f_s - f_t) * u
    value = float((weighted**2).sum()) / denom
    grad = 2.0 * weighted * u / denom
    return LossValue(value=value, grad=grad)


def supervised_loss(
    np_pred: np.ndarray, hv_pred: np.ndarray, np_gt: np.ndarray, hv_gt: np.ndarray
) -> SupervisedValue:
    """Dice + CE on the NP branch plus MSE + MSGE on the HV branch, all with
    unit weights. ``np_gt`` is the foreground mask (or label map)."""
    fg = np.asarray(np_gt) > 0
    d = dice_loss(np_pred[NP_FG_CHANNEL], fg)
    c = ce_loss(np_pred, fg)
    m = mse_loss(hv_pred, hv_gt)
    g = msge_loss(hv_pred, hv_gt, fg)
    grad_np = c.grad.copy()
    grad_np[NP_FG_CHANNEL] += d.grad
    grad_hv = m.grad + g.grad
    parts = {"dice": d.value, "ce": c.value, "mse": m.value, "msge": g.value}
    return SupervisedValue(
        value=d.value + c.value + m.value + g.value,
        grad_np=grad_np,
        grad_hv=grad_hv,
        parts=parts,
    )


def consistency_loss(piac: LossValue, miac: MiacValue, weights: LossWeights) -> ConsistencyValue:
    """gamma1 * PIAC + gamma2 * MIAC, values and gradients alike."""
    value = weights.gamma1 * piac.value + weights.gamma2 * miac.value
    grad_f = weights.gamma1 * piac.grad + weights.gamma2 * miac.grad_f
    grad_b = weights.gamma2 * miac.grad_b
    return ConsistencyValue(value=value, grad_f=grad_f, grad_b=grad_b)
