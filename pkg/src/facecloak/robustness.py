"""DUQ-versus-severity sweeps under JPEG compression, additive noise and blur."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from facecloak.imageops import apply_blur, apply_jpeg, apply_noise
from facecloak.metrics import duq
from facecloak.geometry import match_detections

logger = logging.getLogger(__name__)

OPERATIONS = ("jpeg", "noise", "blur")


@dataclass
class RobustnessConfig:
    jpeg_qualities: tuple[int, ...] = (100, 90, 80, 70, 60)
    noise_stds: tuple[float, ...] = (0.0, 2.0, 4.0, 6.0, 8.0, 10.0)
    blur_stds: tuple[float, ...] = (0.0, 1.0, 2.0, 3.0, 4.0)
    iou_min: float = 0.5
    seed: int = 0

    def __post_init__(self):
        q = list(self.jpeg_qualities)
        if any(not 60 <= v <= 100 for v in q) or q != sorted(q, reverse=True):
            raise ValueError("jpeg_qualities must be descending within [60, 100]")
        if any(not 0 <= v <= 10 for v in self.noise_stds):
            raise ValueError("noise_stds must lie in [0, 10]")
        if any(not 0 <= v <= 4 for v in self.blur_stds):
            raise ValueError("blur_stds must lie in [0, 4]")

    def severities(self, op: str) -> tuple:
        return {"jpeg": self.jpeg_qualities, "noise": self.noise_stds, "blur": self.blur_stds}[op]

    def to_dict(self) -> dict:
        return asdict(self)


def noise_seed(base: int, image_index: int, severity: float) -> list[int]:
    """Seed for one (image, severity) pair, independent of evaluation order."""
    return [base, image_index, int(round(severity * 1000))]


def apply_operation(op: str, image, severity, seed=None, image_id: str = "<array>") -> np.ndarray:
    if op == "jpeg":
        return apply_jpeg(image, int(severity), image_id)
    if op == "noise":
        return apply_noise(image, float(severity), seed)
    if op == "blur":
        return apply_blur(image, float(severity))
    raise ValueError(f"unknown operation {op!r}")


@dataclass
class CurvePoint:
    operation: str
    severity: float
    set: str  # "clean" or "perturbed"
    duq: float
    excluded: int = 0


@dataclass
class RobustnessResult:
    points: list[CurvePoint] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    def curve(self, op: str, which: str) -> tuple[np.ndarray, np.ndarray]:
        pts = [p for p in self.points if p.operation == op and p.set == which]
        return np.array([p.severity for p in pts]), np.array([p.duq for p in pts])

    def rows(self) -> list[dict]:
        return [asdict(p) for p in self.points]


def robustness_sweep(detector, clean_set: Sequence, perturbed_set: Sequence, gt: Sequence, rcfg: RobustnessConfig | None = None) -> RobustnessResult:
    """Apply each operation at each severity to both image sets and record DUQ.

    ``clean_set[i]``, ``perturbed_set[i]`` and ``gt[i]`` describe the same
    image. Images whose processing fails are dropped from that point and
    counted in ``excluded``.
    """
    rcfg = rcfg or RobustnessConfig()
    if not len(clean_set) == len(perturbed_set) == len(gt):
        raise ValueError("clean, perturbed and ground-truth sets must align one-to-one")
    result = RobustnessResult()
    for op in OPERATIONS:
        for sev in rcfg.severities(op):
            for which, images in (("clean", clean_set), ("perturbed", perturbed_set)):
                processed, kept = [], []
                for i, img in enumerate(images):
                    try:
                        processed.append(apply_operation(op, img, sev, noise_seed(rcfg.seed, i, sev), f"{which}[{i}]"))
                        kept.append(i)
                    except Exception as exc:  # one bad image must not sink the sweep
                        result.failures.append(f"{op}@{sev} {which}[{i}]: {exc}")
                        logger.warning("excluding %s[%d] at %s=%s: %s", which, i, op, sev, exc)
                dets = detector.detect_batch(processed) if processed else []
                value = duq(match_detections(d, gt[i], rcfg.iou_min) for d, i in zip(dets, kept))
                result.points.append(CurvePoint(op, float(sev), which, value, len(images) - len(kept)))
    return result


def count_inversions(values, increasing: bool = True) -> int:
    """Adjacent steps that move against the expected direction."""
    d = np.diff(np.asarray(values, dtype=np.float64))
    return int(np.sum(d < 0) if increasing else np.sum(d > 0))
