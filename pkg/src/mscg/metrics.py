"""Per-class IoU / mIoU with the either-label rule for overlapping annotations.

For every valid pixel the predicted class is the argmax of the logits (lowest
index wins ties). If that class is among the pixel's labels it is a true
positive and nothing else is charged; otherwise it is a false positive for the
prediction and a false negative for every labelled class.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

CLASS_NAMES = ("Background", "Cloud shadow", "Double plant", "Planter skip",
               "Standing water", "Waterway", "Weed cluster")


class EmptyMetricState(ValueError):
    pass


@dataclass
class ConfusionState:
    num_classes: int = 7
    include_background_in_miou: bool = True
    fn_per_label: bool = True
    background_counts_for_overlap: bool = True
    empty_iou: str = "exclude"          # exclude | zero | one
    tp: np.ndarray = field(default=None)
    fp: np.ndarray = field(default=None)
    fn: np.ndarray = field(default=None)
    pixels: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "fn"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.num_classes, dtype=np.int64))

    def merge(self, other: "ConfusionState") -> "ConfusionState":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge states with different class counts")
        out = ConfusionState(self.num_classes, self.include_background_in_miou, self.fn_per_label,
                             self.background_counts_for_overlap, self.empty_iou,
                             self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                             self.pixels + other.pixels)
        return out


def accumulate(state: ConfusionState, pred_logits, labels, valid=None) -> ConfusionState:
    logits = np.asarray(pred_logits)
    y = np.asarray(labels).astype(bool)
    if logits.shape != y.shape:
        raise ValueError(f"logits {logits.shape} and labels {y.shape} are not aligned")
    c = state.num_classes
    if logits.shape[1] != c:
        raise ValueError(f"expected {c} class channels, got {logits.shape[1]}")
    if not state.background_counts_for_overlap:
        # background only counts where it is the sole annotation
        others = y[:, 1:].any(axis=1)
        y = y.copy()
        y[:, 0] &= ~others
    k = logits.argmax(axis=1)                                 # b x h x w
    y_px = np.moveaxis(y, 1, -1)                              # b x h x w x C
    m = np.ones(k.shape, dtype=bool) if valid is None else np.asarray(valid).astype(bool).reshape(k.shape)
    k, y_px = k[m], y_px[m]
    hit = np.take_along_axis(y_px, k[:, None], axis=1)[:, 0]
    state.tp += np.bincount(k[hit], minlength=c)
    state.fp += np.bincount(k[~hit], minlength=c)
    missed = y_px[~hit]
    if state.fn_per_label:
        state.fn += missed.sum(axis=0)
    else:
        has = missed.any(axis=1)
        state.fn += np.bincount(missed[has].argmax(axis=1), minlength=c)
    state.pixels += int(m.sum())
    return state


def class_iou(state: ConfusionState) -> np.ndarray:
    """IoU per class; NaN where TP + FP + FN = 0."""
    denom = state.tp + state.fp + state.fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, state.tp / np.maximum(denom, 1), np.nan)


def miou(state: ConfusionState) -> tuple[np.ndarray, float, float]:
    """Per-class IoU, mIoU over all classes and mIoU* without Background."""
    if state.pixels == 0:
        raise EmptyMetricState("no pixels accumulated")
    iou = class_iou(state)
    scored = iou.copy()
    if state.empty_iou == "zero":
        scored = np.nan_to_num(scored, nan=0.0)
    elif state.empty_iou == "one":
        scored = np.nan_to_num(scored, nan=1.0)
    mean_all = float(np.nanmean(scored)) if not np.all(np.isnan(scored)) else float("nan")
    fg = scored[1:]
    mean_fg = float(np.nanmean(fg)) if fg.size and not np.all(np.isnan(fg)) else float("nan")
    if not state.include_background_in_miou:
        mean_all = mean_fg
    return iou, mean_all, mean_fg


def report_csv(state: ConfusionState, class_names=CLASS_NAMES) -> str:
    iou, m, m_star = miou(state)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "iou", "tp", "fp", "fn"])
    for j in range(state.num_classes):
        name = class_names[j] if j < len(class_names) else f"class_{j}"
        w.writerow([name, "" if np.isnan(iou[j]) else f"{iou[j]:.6f}", state.tp[j], state.fp[j], state.fn[j]])
    w.writerow(["mIoU", f"{m:.6f}", "", "", ""])
    w.writerow(["mIoU*", f"{m_star:.6f}", "", "", ""])
    return buf.getvalue()
