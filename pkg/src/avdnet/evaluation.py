"""IoU, detection matching, interpolated average precision and mAP."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class GroundTruthBox:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        for name in ("w", "h"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name}={v} outside (0, 1]")

    @property
    def box(self) -> tuple:
        return (self.cx, self.cy, self.w, self.h)


def to_corners(box) -> tuple:
    cx, cy, w, h = box
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def iou(a, b) -> float:
    """IoU of two ``(cx, cy, w, h)`` boxes."""
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise ValueError(f"boxes need positive width and height: {a}, {b}")
    ax0, ay0, ax1, ay1 = to_corners(a)
    bx0, by0, bx1, by1 = to_corners(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corners as the overlap, so identical boxes give exactly 1
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return float(min(1.0, inter / union))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(n, 4)`` and ``(m, 4)`` center-format box arrays."""
    a = np.asarray(a, np.float64).reshape(-1, 4)
    b = np.asarray(b, np.float64).reshape(-1, 4)
    a0, a1 = a[:, :2] - a[:, 2:] / 2, a[:, :2] + a[:, 2:] / 2
    b0, b1 = b[:, :2] - b[:, 2:] / 2, b[:, :2] + b[:, 2:] / 2
    lo = np.maximum(a0[:, None], b0[None])
    hi = np.minimum(a1[:, None], b1[None])
    wh = np.clip(hi - lo, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = np.prod(a1 - a0, axis=1)
    area_b = np.prod(b1 - b0, axis=1)
    union = area_a[:, None] + area_b[None] - inter
    return np.minimum(1.0, inter / union)


def clip_box(box) -> tuple:
    """Clip a center-format box to the unit square; degenerate results keep a 1e-12 extent."""
    corners = to_corners(box)
    if min(corners) >= 0.0 and max(corners) <= 1.0:
        return tuple(box)
    x0, y0, x1, y1 = (min(1.0, max(0.0, v)) for v in corners)
    w, h = max(x1 - x0, 1e-12), max(y1 - y0, 1e-12)
    return ((x0 + x1) / 2, (y0 + y1) / 2, w, h)


def _score_order(dets) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].box[0]))


def match_detections(dets: Sequence, gts: Sequence, iou_thresh: float = 0.5) -> list[bool]:
    """TP (True) / FP (False) per detection, aligned with the input order.

    One image and one class.  Detections are visited by descending score;
    each claims its best-overlapping still-unmatched ground truth if that
    overlap reaches ``iou_thresh``.
    """
    labels = [False] * len(dets)
    if not dets:
        return labels
    if not gts:
        return labels
    # predictions may overhang the image; they are clipped only here
    ious = iou_matrix([clip_box(d.box) for d in dets], [g.box for g in gts])
    matched = np.zeros(len(gts), bool)
    for i in _score_order(dets):
        cand = np.where(matched, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_thresh:
            matched[j] = True
            labels[i] = True
    return labels


def _cumulative(labels: Sequence[bool], num_gt: int):
    tp = np.cumsum(np.asarray(labels, dtype=np.int64))
    n = np.arange(1, len(labels) + 1)
    return tp / num_gt, tp / n


def average_precision(labels: Sequence[bool], num_gt: int) -> Optional[float]:
    """All-point interpolated AP of score-sorted TP/FP ``labels``.

    Returns None when there is nothing to evaluate (no ground truth and no
    detections).  Detections without any ground truth score 0 with a warning.
    """
    if num_gt < 0:
        raise ValueError(f"num_gt must be >= 0, got {num_gt}")
    if num_gt == 0:
        if len(labels) == 0:
            return None
        warnings.warn("detections present for a class with no ground truth; AP set to 0")
        return 0.0
    if len(labels) == 0:
        return 0.0
    recall, precision = _cumulative(labels, num_gt)
    mrec = np.concatenate(([0.0], recall))
    mpre = np.concatenate(([0.0], precision))
    # precision envelope: best precision at any recall >= r
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_ap(per_class_ap: Sequence[Optional[float]]) -> float:
    """Mean over the classes whose AP is defined (None marks a skipped class)."""
    defined = [ap for ap in per_class_ap if ap is not None]
    if not defined:
        raise ValueError("no evaluable class: every class lacks ground truth")
    return float(sum(defined) / len(defined))


@dataclass
class PRCurve:
    """Cumulative precision/recall staircase, one point per ranked detection."""

    recall: list = field(default_factory=list)
    precision: list = field(default_factory=list)
    thresholds: list = field(default_factory=list)

    @property
    def points(self) -> list[tuple]:
        return list(zip(self.recall, self.precision))

    def area(self) -> float:
        """Area under the interpolated staircase; equals :func:`average_precision`."""
        total, best, prev_r = 0.0, 0.0, None
        rows = list(zip(self.recall, self.precision))
        # sweep right to left carrying the running max precision
        for r, p in reversed(rows):
            if prev_r is not None and r < prev_r:
                total += (prev_r - r) * best
            best = max(best, p)
            prev_r = r
        if prev_r is not None:
            total += prev_r * best
        return total

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["threshold", "recall", "precision"])
            for t, r, p in zip(self.thresholds, self.recall, self.precision):
                out.writerow([f"{t:.6f}", f"{r:.6f}", f"{p:.6f}"])


def pr_curve(labels: Sequence[bool], num_gt: int, scores: Optional[Sequence[float]] = None) -> PRCurve:
    if num_gt < 0:
        raise ValueError(f"num_gt must be >= 0, got {num_gt}")
    if num_gt == 0:
        if labels:
            warnings.warn("detections present for a class with no ground truth")
        return PRCurve([0.0] * len(labels), [0.0] * len(labels), list(scores or [0.0] * len(labels)))
    recall, precision = _cumulative(labels, num_gt)
    thr = list(scores) if scores is not None else [float("nan")] * len(labels)
    return PRCurve(recall.tolist(), precision.tolist(), thr)


@dataclass
class EvalResult:
    per_class_ap: dict
    map: float
    curves: dict

    def report(self) -> str:
        lines = []
        for c in sorted(self.per_class_ap):
            ap = self.per_class_ap[c]
            lines.append(f"class={c} ap={'skipped' if ap is None else f'{ap:.6f}'}")
        lines.append(f"map={self.map:.6f}")
        return "\n".join(lines) + "\n"


def evaluate(detections: Sequence[Sequence], ground_truth: Sequence[Sequence], num_classes: int,
             iou_thresh: float = 0.5) -> EvalResult:
    """Per-class AP and mAP over a set of images.

    ``detections[i]`` and ``ground_truth[i]`` belong to image ``i``.  Equal
    scores are ranked by image index, then by box center x.
    """
    if len(detections) != len(ground_truth):
        raise ValueError(f"{len(detections)} detection lists for {len(ground_truth)} images")
    per_class, curves = {}, {}
    for c in range(num_classes):
        ranked = []
        num_gt = 0
        for img, (dets, gts) in enumerate(zip(detections, ground_truth)):
            dc = [d for d in dets if d.class_id == c]
            gc = [g for g in gts if g.class_id == c]
            num_gt += len(gc)
            for d, tp in zip(dc, match_detections(dc, gc, iou_thresh)):
                ranked.append((-d.score, img, d.box[0], tp, d.score))
        ranked.sort(key=lambda r: r[:3])
        labels = [r[3] for r in ranked]
        scores = [r[4] for r in ranked]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            # classes absent from the ground truth do not enter the mean
            per_class[c] = average_precision(labels, num_gt) if num_gt else None
            curves[c] = pr_curve(labels, num_gt, scores)
    return EvalResult(per_class, mean_ap(list(per_class.values())), curves)


def write_report(result: EvalResult, path, curve_prefix: Optional[str] = None) -> None:
    """Write ``class=<id> ap=<float>`` lines plus ``map=``; optional per-class PR CSVs."""
    Path(path).write_text(result.report())
    if curve_prefix is not None:
        for c, curve in result.curves.items():
            curve.to_csv(f"{curve_prefix}_class{c}.csv")
