"""Adaptive class weighting loss.

Class weights are median-frequency weights re-estimated from a running mean of
per-batch class pixel frequencies. They are broadcast per pixel, scaled by
``1 + y + y_tilde`` and applied to the positive/negative balanced error term
``e - log((1 - e) / (1 + e))``; a log mean-dice term is added on top.

Tensors follow ``b x C x h x w``; the validity mask is ``b x 1 x h x w``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Var, ops
from .numerics.autodiff import as_var
from .numerics.ops import EPS_LOG

EPS = 1e-5
DICE_EPS = 1e-5


class EmptyBatch(ValueError):
    """The batch has no valid labelled pixel; it must be skipped."""


@dataclass
class ClassFrequencyState:
    num_classes: int = 7
    t: int = 0
    f: np.ndarray = None
    epsilon: float = EPS

    def __post_init__(self):
        if self.f is None:
            self.f = np.zeros(self.num_classes)

    def copy(self) -> "ClassFrequencyState":
        return ClassFrequencyState(self.num_classes, self.t, self.f.copy(), self.epsilon)


@dataclass
class LossBreakdown:
    acw: Var
    kl: Var
    dl: Var
    total: Var
    dice: np.ndarray
    weights: np.ndarray
    extras: dict = field(default_factory=dict)

    def scalars(self) -> dict[str, float]:
        return {"acw": self.acw.item(), "kl": self.kl.item(), "dl": self.dl.item(), "total": self.total.item()}


def _valid(valid, like: np.ndarray) -> np.ndarray:
    if valid is None:
        return np.ones((like.shape[0], 1) + like.shape[2:], dtype=like.dtype)
    return np.asarray(valid).astype(like.dtype)


def batch_frequency(labels, valid=None) -> np.ndarray | None:
    """Share of labelled valid pixels per class, or ``None`` if there are none."""
    y = np.asarray(labels, dtype=np.float64)
    m = _valid(valid, y)
    counts = (y * m).sum(axis=(0, 2, 3))
    total = counts.sum()
    if total == 0:
        return None
    return counts / total


def update_frequency(state: ClassFrequencyState, labels, valid=None) -> bool:
    """Fold one batch into the running class frequencies.

    Returns ``False`` (state untouched) when the batch has no valid labelled pixel.
    """
    f_hat = batch_frequency(labels, valid)
    if f_hat is None:
        return False
    t = state.t + 1
    state.f = (f_hat + (t - 1) * state.f) / t
    state.t = t
    return True


def median_weights(state: ClassFrequencyState) -> np.ndarray:
    if state.t < 1:
        raise ValueError("median_weights needs at least one frequency update")
    return ops.median(state.f) / (state.f + state.epsilon)


def pixel_weights(w_t, y, y_tilde) -> Var:
    """``w_j / sum(w) * (1 + y + y_tilde)`` broadcast over pixels."""
    y_tilde = as_var(y_tilde)
    w = np.asarray(w_t, dtype=np.float64)
    total = w.sum()
    # a zero median (most classes unseen so far) zeroes every weight; fall back to uniform
    norm = w / total if total > 0 else np.full_like(w, 1.0 / w.size)
    norm = norm.astype(y_tilde.dtype).reshape(1, -1, 1, 1)
    return (1.0 + np.asarray(y, dtype=y_tilde.dtype) + y_tilde) * norm


def pnc(y, y_tilde) -> Var:
    """``e - log((1 - e + eps) / (1 + e + eps))`` with ``e = (y - y_tilde)^2``."""
    y_tilde = as_var(y_tilde)
    yv = np.asarray(y, dtype=y_tilde.dtype)
    e = ops.square(yv - y_tilde)
    # 1 - e factored as (1 - y + y~)(1 + y - y~) avoids cancellation when e -> 1
    one_minus_e = ((1.0 - yv) + y_tilde) * ((1.0 + yv) - y_tilde)
    ratio = (one_minus_e + EPS_LOG) / (1.0 + EPS_LOG + e)
    return e - ops.log(ratio, floor=False)


def dice_coefficients(y, y_tilde, valid=None, eps: float = DICE_EPS) -> Var:
    """Per-class soft dice over valid pixels."""
    y_tilde = as_var(y_tilde)
    yv = np.asarray(y, dtype=y_tilde.dtype)
    m = _valid(valid, yv)
    inter = ops.sum(y_tilde * (yv * m), axis=(0, 2, 3))
    denom = ops.sum(y_tilde * m, axis=(0, 2, 3)) + (yv * m).sum(axis=(0, 2, 3)) + eps
    return 2.0 * inter / denom


def _mean_dice(d: Var, y, valid, skip_absent: bool) -> Var:
    if not skip_absent:
        return ops.mean(d)
    present = (np.asarray(y) * _valid(valid, np.asarray(y, dtype=np.float64))).sum(axis=(0, 2, 3)) > 0
    if not present.any():
        return ops.mean(d)
    return ops.sum(d * present.astype(d.dtype)) / float(present.sum())


def acw_total(y, y_tilde, state: ClassFrequencyState, kl=0.0, dl=0.0, valid=None,
              skip_absent: bool = False) -> LossBreakdown:
    """Full objective ``L_acw + L_kl + L_dl`` for one batch.

    ``state`` must already include this batch (see :func:`update_frequency`).
    ``y_tilde`` are class probabilities.
    """
    y_tilde = as_var(y_tilde)
    yv = np.asarray(y, dtype=y_tilde.dtype)
    m = _valid(valid, yv)
    count = float(m.sum())
    if count == 0:
        raise EmptyBatch("no valid pixels in batch")
    w_t = median_weights(state)
    weighted = pixel_weights(w_t, yv, y_tilde) * pnc(yv, y_tilde)
    pnc_term = ops.sum(weighted * m) / count
    d = dice_coefficients(yv, y_tilde, m)
    mean_d = ops.clamp(_mean_dice(d, yv, m, skip_absent), lo=EPS_LOG)
    acw = pnc_term - ops.log(mean_d, floor=False)
    kl, dl = as_var(kl, y_tilde.dtype), as_var(dl, y_tilde.dtype)
    return LossBreakdown(acw=acw, kl=kl, dl=dl, total=acw + kl + dl,
                         dice=d.value.copy(), weights=w_t.copy(),
                         extras={"pnc_term": pnc_term.item(), "mean_dice": mean_d.item()})


def dice_total(y, y_tilde, kl=0.0, dl=0.0, valid=None, skip_absent: bool = False) -> LossBreakdown:
    """Plain multi-class soft dice baseline, ``1 - mean(d)``, plus the regularisers."""
    y_tilde = as_var(y_tilde)
    yv = np.asarray(y, dtype=y_tilde.dtype)
    m = _valid(valid, yv)
    if m.sum() == 0:
        raise EmptyBatch("no valid pixels in batch")
    d = dice_coefficients(yv, y_tilde, m)
    loss = 1.0 - _mean_dice(d, yv, m, skip_absent)
    kl, dl = as_var(kl, y_tilde.dtype), as_var(dl, y_tilde.dtype)
    return LossBreakdown(acw=loss, kl=kl, dl=dl, total=loss + kl + dl,
                         dice=d.value.copy(), weights=np.ones(yv.shape[1]))


def cross_entropy_total(y, logits, kl=0.0, dl=0.0, valid=None) -> LossBreakdown:
    """Cross-entropy against the multi-hot target normalised per pixel."""
    logits = as_var(logits)
    yv = np.asarray(y, dtype=logits.dtype)
    m = _valid(valid, yv)
    count = float(m.sum())
    if count == 0:
        raise EmptyBatch("no valid pixels in batch")
    target = yv / np.maximum(yv.sum(axis=1, keepdims=True), 1.0)
    loss = -ops.sum(ops.log_softmax(logits, axis=1) * (target * m)) / count
    d = dice_coefficients(yv, ops.softmax(logits, axis=1), m)
    kl, dl = as_var(kl, logits.dtype), as_var(dl, logits.dtype)
    return LossBreakdown(acw=loss, kl=kl, dl=dl, total=loss + kl + dl,
                         dice=d.value.copy(), weights=np.ones(yv.shape[1]))
