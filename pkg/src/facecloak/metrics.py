"""Detection-set quality (DUQ), average precision and SSIM."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from facecloak.geometry import MatchResult, match_detections


class EmptyDetectionsWarning(UserWarning):
    pass


def _counts(item) -> tuple[int, int, int]:
    if isinstance(item, MatchResult):
        return item.n_true, item.n_false, item.n_gt
    t, f, g = item
    return int(t), int(f), int(g)


def duq(results: Iterable) -> float:
    """Data utility quality: (sum true - sum false) / sum ground truth.

    ``results`` holds :class:`MatchResult` objects or ``(true, false, gt)``
    count triples, one per image.
    """
    n_true = n_false = n_gt = 0
    for item in results:
        t, f, g = _counts(item)
        n_true, n_false, n_gt = n_true + t, n_false + f, n_gt + g
    if n_gt == 0:
        raise ValueError("DUQ is undefined without ground-truth faces")
    return (n_true - n_false) / n_gt


def _ranked_hits(detections: Sequence[Sequence], gts: Sequence[Sequence], iou_min: float):
    """Flatten per-image detections into (confidence, is_true) sorted by confidence."""
    conf, hit = [], []
    for dets, gt in zip(detections, gts, strict=True):
        m = match_detections(dets, gt, iou_min)
        true_idx = {d for d, _ in m.true_matches}
        for i, (_, c) in enumerate(dets):
            conf.append(float(c))
            hit.append(i in true_idx)
    conf = np.asarray(conf, dtype=np.float64)
    hit = np.asarray(hit, dtype=bool)
    order = np.argsort(-conf, kind="stable")
    return conf[order], hit[order]


def precision_recall(detections, gts, iou_min: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall after each detection in descending confidence order."""
    n_gt = sum(len(g) for g in gts)
    _, hit = _ranked_hits(detections, gts, iou_min)
    tp = np.cumsum(hit)
    fp = np.cumsum(~hit)
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / n_gt if n_gt else np.zeros_like(precision, dtype=np.float64)
    return precision, recall


def average_precision(detections, gts, iou_min: float = 0.5, mode: str = "continuous") -> float:
    """Area under the precision-recall curve over a dataset.

    ``detections[i]`` are ``(box, confidence)`` pairs for image ``i`` and
    ``gts[i]`` its ground-truth boxes. ``mode`` is ``"continuous"`` (all-point
    area under the monotone precision envelope), ``"step"`` (raw precision at
    each recall increment) or ``"11point"``.
    """
    if sum(len(d) for d in detections) == 0:
        warnings.warn("no detections; AP is 0", EmptyDetectionsWarning, stacklevel=2)
        return 0.0
    if sum(len(g) for g in gts) == 0:
        raise ValueError("AP is undefined without ground truth")
    precision, recall = precision_recall(detections, gts, iou_min)
    if mode == "step":
        prev = np.concatenate([[0.0], recall[:-1]])
        return float(np.sum((recall - prev) * precision))
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if mode == "continuous":
        r = np.concatenate([[0.0], recall])
        return float(np.sum((r[1:] - r[:-1]) * envelope))
    if mode == "11point":
        pts = []
        for t in np.linspace(0, 1, 11):
            ok = recall >= t
            pts.append(envelope[ok].max() if ok.any() else 0.0)
        return float(np.mean(pts))
    raise ValueError(f"unknown AP mode {mode!r}")


SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _gauss1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable windowed mean over H, W keeping only fully covered windows."""
    half = len(g) // 2
    out = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[half : x.shape[0] - half, half : x.shape[1] - half]


def ssim_map(a, b, data_range: float = 255.0) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    g = _gauss1d()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = 255.0) -> float:
    """Mean structural similarity over windows and channels (Gaussian 11x11, std 1.5)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape == b.shape and np.array_equal(a, b):
        return 1.0
    return float(ssim_map(a, b, data_range).mean())


@dataclass
class EvaluationReport:
    per_image: list[dict]  # {"true", "false", "gt"} per image
    duq: float
    ap: float
    ap_empty: bool = False
    ssim_mean: float | None = None
    ssim_per_image: list[float] | None = None
    config: dict = field(default_factory=dict)

    @property
    def totals(self) -> dict:
        return {k: sum(r[k] for r in self.per_image) for k in ("true", "false", "gt")}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["totals"] = self.totals
        return d


def evaluate(detections, gts, iou_min: float = 0.5, ap_mode: str = "continuous", originals=None, perturbed=None, config=None) -> EvaluationReport:
    """Match every image's detections, then aggregate DUQ, AP and (optionally) SSIM."""
    matches = [match_detections(d, g, iou_min) for d, g in zip(detections, gts, strict=True)]
    per_image = [{"true": m.n_true, "false": m.n_false, "gt": m.n_gt} for m in matches]
    empty = sum(len(d) for d in detections) == 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyDetectionsWarning)
        ap = average_precision(detections, gts, iou_min, ap_mode)
    report = EvaluationReport(per_image, duq(matches), ap, empty, config=dict(config or {}))
    if originals is not None and perturbed is not None:
        vals = [ssim(o, p) for o, p in zip(originals, perturbed, strict=True)]
        report.ssim_per_image = vals
        report.ssim_mean = float(np.mean(vals))
    return report
