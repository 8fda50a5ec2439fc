"""Axis-aligned boxes, IoU and detection-to-ground-truth matching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    """Box in continuous pixel coordinates, ``(x, y)`` is the top-left corner."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive width and height, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def clip(self, width: float, height: float) -> "BoundingBox":
        """Clip to the image extent ``[0, width] x [0, height]``.

        Raises ValueError when nothing of the box lies inside the image.
        """
        x0, y0 = max(self.x, 0.0), max(self.y, 0.0)
        x1, y1 = min(self.x + self.w, width), min(self.y + self.h, height)
        return BoundingBox(x0, y0, x1 - x0, y1 - y0)

    def pixel_slice(self) -> tuple[slice, slice]:
        """Row/column slices for cropping; the only place coordinates get rounded."""
        x0, y0 = int(round(self.x)), int(round(self.y))
        x1, y1 = int(round(self.x + self.w)), int(round(self.y + self.h))
        return slice(y0, y1), slice(x0, x1)


def as_box(b) -> BoundingBox:
    return b if isinstance(b, BoundingBox) else BoundingBox(*map(float, b))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; shared edges count as no overlap."""
    a, b = as_box(a), as_box(b)
    if a == b:
        return 1.0
    dw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    dh = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if dw <= 0 or dh <= 0:
        return 0.0
    # (x + w) - x need not round back to w; cap so nested boxes stay exact
    inter = min(dw, a.w, b.w) * min(dh, a.h, b.h)
    return min(1.0, inter / (a.w * a.h + b.w * b.h - inter))


def boxes_to_array(boxes: Sequence) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.asarray([as_box(b).as_tuple() for b in boxes], dtype=np.float64)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` arrays of ``(x, y, w, h)`` rows."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    dw = np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2]) - np.maximum(
        a[:, None, 0], b[None, :, 0]
    )
    dh = np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3]) - np.maximum(
        a[:, None, 1], b[None, :, 1]
    )
    dw = np.minimum(dw, np.minimum(a[:, None, 2], b[None, :, 2]))
    dh = np.minimum(dh, np.minimum(a[:, None, 3], b[None, :, 3]))
    inter = np.clip(dw, 0, None) * np.clip(dh, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.minimum(np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0), 1.0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices by descending score."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores), kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        overlaps = iou_matrix(boxes[i : i + 1], boxes[order[1:]])[0]
        order = order[1:][overlaps <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


@dataclass
class MatchResult:
    true_matches: list[tuple[int, int]]  # (detection index, ground-truth index)
    false_dets: list[int]
    missed_gt: list[int]

    @property
    def n_true(self) -> int:
        return len(self.true_matches)

    @property
    def n_false(self) -> int:
        return len(self.false_dets)

    @property
    def n_gt(self) -> int:
        return len(self.true_matches) + len(self.missed_gt)


def match_detections(dets: Sequence, gt: Sequence, iou_min: float = 0.5) -> MatchResult:
    """Greedily match detections to ground truth in descending confidence order.

    ``dets`` holds ``(box, confidence)`` pairs. Each detection claims the
    unmatched ground-truth box it overlaps most, provided that IoU reaches
    ``iou_min``; ties in confidence keep input order.
    """
    if not 0 < iou_min <= 1:
        raise ValueError(f"iou_min must lie in (0, 1], got {iou_min}")
    det_boxes = boxes_to_array([d[0] for d in dets])
    conf = np.asarray([float(d[1]) for d in dets], dtype=np.float64)
    if conf.size and (conf.min() < 0 or conf.max() > 1):
        raise ValueError("detection confidences must lie in [0, 1]")
    gt_boxes = boxes_to_array(gt)
    overlaps = iou_matrix(det_boxes, gt_boxes)

    taken = np.zeros(len(gt_boxes), dtype=bool)
    matches, false = [], []
    for d in np.argsort(-conf, kind="stable"):
        cand = np.where(taken, -1.0, overlaps[d]) if len(gt_boxes) else np.zeros(0)
        g = int(np.argmax(cand)) if cand.size else -1
        if g >= 0 and cand[g] >= iou_min:
            taken[g] = True
            matches.append((int(d), g))
        else:
            false.append(int(d))
    missed = [int(i) for i in np.flatnonzero(~taken)]
    return MatchResult(matches, sorted(false), missed)
