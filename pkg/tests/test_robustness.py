import numpy as np
import pytest

from facecloak.detector.synthetic import SyntheticFaceSpec, sample_batch
from facecloak.geometry import match_detections
from facecloak.metrics import duq
from facecloak.robustness import (
    RobustnessConfig,
    apply_operation,
    count_inversions,
    noise_seed,
    robustness_sweep,
)


class OracleDetector:
    """Returns the ground truth for untouched images and nothing once they change."""

    def __init__(self, samples):
        self.samples = samples

    def detect_batch(self, images):
        out = []
        for img in images:
            hit = next((b for s, b in self.samples if np.array_equal(s, img)), None)
            out.append([(box, 0.9) for box in hit] if hit is not None else [])
        return out


@pytest.fixture(scope="module")
def samples():
    return [(img.astype(np.float64), boxes) for img, boxes in sample_batch(SyntheticFaceSpec(), 3, seed=9)]


def test_config_validation():
    with pytest.raises(ValueError):
        RobustnessConfig(jpeg_qualities=(60, 90))
    with pytest.raises(ValueError):
        RobustnessConfig(noise_stds=(0, 12))
    with pytest.raises(ValueError):
        RobustnessConfig(blur_stds=(-1,))


@pytest.mark.parametrize("op,sev", [("noise", 0), ("blur", 0)])
def test_zero_severity_row_equals_unprocessed(samples, op, sev):
    imgs = [s for s, _ in samples]
    gt = [b for _, b in samples]
    det = OracleDetector(samples)
    base = duq(match_detections(d, g) for d, g in zip(det.detect_batch(imgs), gt))
    res = robustness_sweep(det, imgs, imgs, gt, RobustnessConfig())
    sev_arr, vals = res.curve(op, "clean")
    assert vals[list(sev_arr).index(sev)] == base == 1.0


def test_sweep_shape_and_degradation(samples):
    imgs = [s for s, _ in samples]
    gt = [b for _, b in samples]
    res = robustness_sweep(OracleDetector(samples), imgs, imgs, gt)
    assert len(res.points) == 2 * (5 + 6 + 5)
    _, noise = res.curve("noise", "clean")
    assert noise[0] == 1.0 and all(v == 0.0 for v in noise[1:])


def test_failing_image_is_excluded(samples):
    imgs = [s for s, _ in samples]
    gt = [b for _, b in samples]
    bad = list(imgs)
    bad[1] = np.zeros((4, 4, 3, 2))
    res = robustness_sweep(OracleDetector(samples), imgs, bad, gt, RobustnessConfig(jpeg_qualities=(90,), noise_stds=(0,), blur_stds=(0,)))
    jpeg_pert = [p for p in res.points if p.operation == "jpeg" and p.set == "perturbed"][0]
    assert jpeg_pert.excluded == 1 and res.failures


def test_noise_seed_independent_of_order():
    img = np.full((8, 8, 3), 100.0)
    a = apply_operation("noise", img, 4, noise_seed(0, 2, 4))
    b = apply_operation("noise", img, 4, noise_seed(0, 2, 4))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, apply_operation("noise", img, 4, noise_seed(0, 3, 4)))


def test_count_inversions():
    assert count_inversions([0.9, 0.8, 0.85, 0.5], increasing=False) == 1
    assert count_inversions([0.1, 0.2, 0.3]) == 0
    with pytest.raises(ValueError):
        apply_operation("rotate", np.zeros((8, 8, 3)), 1)
