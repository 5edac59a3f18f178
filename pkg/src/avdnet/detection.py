"""Head decoding, per-class NMS and k-means anchor priors."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .evaluation import iou_matrix

DEFAULT_CONF_THRESH = 0.25
DEFAULT_NMS_THRESH = 0.45


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple  # (cx, cy, w, h), image fractions

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.box[2] <= 0 or self.box[3] <= 0:
            raise ValueError(f"box needs positive width and height, got {self.box}")


class AnchorSet:
    """``k`` prior box shapes ``(w, h)`` as image fractions, sorted by area."""

    def __init__(self, sizes):
        sizes = np.asarray(sizes, np.float64).reshape(-1, 2)
        if len(sizes) == 0 or np.any(sizes <= 0):
            raise ValueError(f"anchors must be non-empty and positive, got {sizes.tolist()}")
        order = np.lexsort((sizes[:, 0], sizes[:, 0] * sizes[:, 1]))
        self.sizes = sizes[order]

    def __len__(self):
        return len(self.sizes)

    def __iter__(self):
        return iter(map(tuple, self.sizes))

    def __eq__(self, other):
        return isinstance(other, AnchorSet) and np.array_equal(self.sizes, other.sizes)

    def __repr__(self):
        return f"AnchorSet({self.sizes.tolist()})"

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{w:.6f} {h:.6f}\n" for w, h in self.sizes))

    @classmethod
    def load(cls, path) -> "AnchorSet":
        rows = []
        for n, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{n}: expected 'w h', got {line!r}")
            rows.append([float(p) for p in parts])
        return cls(rows)


def _anchor_array(anchors) -> np.ndarray:
    if isinstance(anchors, AnchorSet):
        return anchors.sizes
    return np.asarray(anchors, np.float64).reshape(-1, 2)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def decode(raw: np.ndarray, anchors, conf_thresh: float = DEFAULT_CONF_THRESH,
           num_classes: Optional[int] = None) -> list[Detection]:
    """Turn one image's head output ``(A*(5+C), S, S)`` into detections.

    Per cell ``(i, j)`` and anchor ``a``: center ``((sigmoid(tx)+j)/S,
    (sigmoid(ty)+i)/S)``, size ``anchor * exp(tw, th)``, score
    ``sigmoid(to) * max softmax(class logits)``.
    """
    sizes = _anchor_array(anchors)
    na = len(sizes)
    if raw.ndim != 3 or raw.shape[1] != raw.shape[2]:
        raise ValueError(f"expected a (channels, S, S) tensor, got {raw.shape}")
    per = raw.shape[0] // na
    if raw.shape[0] != na * per or per < 6 or (num_classes is not None and per != 5 + num_classes):
        want = f"{na}*(5+{num_classes})" if num_classes is not None else f"a multiple of {na} (>= {na * 6})"
        raise ValueError(f"head has {raw.shape[0]} channels, expected {want}")
    s = raw.shape[1]
    t = raw.astype(np.float64).reshape(na, per, s, s)
    cols = np.arange(s)[None, None, :]
    rows = np.arange(s)[None, :, None]
    cx = (sigmoid(t[:, 0]) + cols) / s
    cy = (sigmoid(t[:, 1]) + rows) / s
    w = sizes[:, 0, None, None] * np.exp(t[:, 2])
    h = sizes[:, 1, None, None] * np.exp(t[:, 3])
    obj = sigmoid(t[:, 4])
    probs = softmax(t[:, 5:], axis=1)
    cls = probs.argmax(axis=1)
    # a finite logit never reaches probability 1, even where float rounding would
    score = np.minimum(obj * probs.max(axis=1), np.nextafter(1.0, 0.0))

    dets = []
    # natural order: row i, column j, anchor a
    keep = np.argwhere((score >= conf_thresh).transpose(1, 2, 0))
    for i, j, a in keep:
        dets.append(Detection(int(cls[a, i, j]), float(score[a, i, j]),
                              (float(cx[a, i, j]), float(cy[a, i, j]), float(w[a, i, j]), float(h[a, i, j]))))
    return dets


def nms(dets: Sequence[Detection], iou_thresh: float = DEFAULT_NMS_THRESH) -> list[Detection]:
    """Greedy per-class suppression.

    A box survives iff its IoU with every higher-ranked survivor of its class
    stays below ``iou_thresh``.  Ranking is score descending, then smaller cx,
    then smaller cy.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    ranked = sorted(dets, key=lambda d: (-d.score, d.box[0], d.box[1]))
    kept: list[Detection] = []
    by_class: dict[int, list] = {}
    for d in ranked:
        boxes = by_class.setdefault(d.class_id, [])
        if boxes and iou_matrix([d.box], boxes).max() >= iou_thresh:
            continue
        boxes.append(d.box)
        kept.append(d)
    return kept


def shape_iou(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """IoU of co-centered ``(w, h)`` shapes: ``(n, 2)`` x ``(k, 2)`` -> ``(n, k)``."""
    boxes = np.asarray(boxes, np.float64).reshape(-1, 2)
    anchors = np.asarray(anchors, np.float64).reshape(-1, 2)
    inter = np.minimum(boxes[:, None, 0], anchors[None, :, 0]) * np.minimum(boxes[:, None, 1], anchors[None, :, 1])
    union = (boxes[:, 0] * boxes[:, 1])[:, None] + (anchors[:, 0] * anchors[:, 1])[None] - inter
    return inter / union


def kmeans_objective(boxes, centroids) -> float:
    """Summed ``1 - shape_iou`` distance of every box to its nearest centroid."""
    return float(np.sum(1.0 - shape_iou(boxes, centroids).max(axis=1)))


def kmeans_anchors(boxes, k: int = 4, seed: int = 0, max_rounds: int = 300,
                   history: Optional[list] = None) -> AnchorSet:
    """Cluster ``(w, h)`` pairs with distance ``1 - shape IoU``.

    Centroids start at ``k`` distinct shapes drawn without replacement and
    move to their members' coordinate mean.  A move that would raise a
    cluster's own distance sum is rejected, so the objective never goes up.
    ``history``, if given, receives the objective after every round.
    """
    boxes = np.asarray(boxes, np.float64).reshape(-1, 2)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(boxes) < k:
        raise ValueError(f"need at least k={k} boxes, got {len(boxes)}")
    if np.any(boxes <= 0):
        raise ValueError("box shapes must be positive")
    unique = np.unique(boxes, axis=0)
    if len(unique) < k:
        raise ValueError(
            f"only {len(unique)} distinct box shapes for k={k}; lower k or add more varied annotations"
        )
    rng = np.random.default_rng(seed)
    centroids = unique[np.sort(rng.choice(len(unique), k, replace=False))].copy()
    assign = None
    for _ in range(max_rounds):
        new_assign = shape_iou(boxes, centroids).argmax(axis=1)
        if history is not None:
            history.append(kmeans_objective(boxes, centroids))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = boxes[assign == c]
            if len(members) == 0:
                continue
            mean = members.mean(axis=0)
            old_cost = np.sum(1.0 - shape_iou(members, centroids[c]))
            if np.sum(1.0 - shape_iou(members, mean)) <= old_cost:
                centroids[c] = mean
    return AnchorSet(centroids)


def write_detections(dets: Sequence[Detection], path) -> None:
    """One ``class_id score cx cy w h`` line per detection, 6 decimals."""
    Path(path).write_text("".join(format_detection(d) + "\n" for d in dets))


def format_detection(d: Detection) -> str:
    cx, cy, w, h = d.box
    return f"{d.class_id} {d.score:.6f} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}"


def read_detections(path) -> list[Detection]:
    dets = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"{path}:{n}: expected 6 fields, got {len(parts)}")
        c, score, cx, cy, w, h = parts
        dets.append(Detection(int(c), float(score), (float(cx), float(cy), float(w), float(h))))
    return dets
