"""Image processing operations used for robustness sweeps and training augmentation.

All operations take and return ``H x W x 3`` arrays on the 0-255 scale and
return integer-valued float arrays clipped to ``[0, 255]``.
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image
from scipy.ndimage import correlate

BLUR_SIZE = 5


class CodecError(RuntimeError):
    pass


def to_uint8(image) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)


def apply_jpeg(image, quality: int, image_id: str = "<array>") -> np.ndarray:
    """Baseline JPEG encode/decode round trip at ``quality`` (1-100)."""
    if not 1 <= int(quality) <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {quality}")
    buf = io.BytesIO()
    try:
        Image.fromarray(to_uint8(image)).save(buf, format="JPEG", quality=int(quality), subsampling=0)
        buf.seek(0)
        with Image.open(buf) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise CodecError(f"JPEG round trip failed for {image_id}: {exc}") from exc


def jpeg_size(image, quality: int) -> int:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="JPEG", quality=int(quality), subsampling=0)
    return buf.tell()


def apply_noise(image, sigma_add: float, seed) -> np.ndarray:
    """Add i.i.d. N(0, sigma_add) noise, clip and quantize."""
    if sigma_add < 0:
        raise ValueError("sigma_add must be >= 0")
    image = np.asarray(image, dtype=np.float64)
    if sigma_add == 0:
        return np.clip(np.round(image), 0, 255)
    noise = np.random.default_rng(seed).normal(0.0, sigma_add, size=image.shape)
    return np.clip(np.round(image + noise), 0, 255)


def gaussian_kernel(sigma: float, size: int = BLUR_SIZE) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def apply_blur(image, sigma_blur: float) -> np.ndarray:
    """Normalized 5x5 Gaussian blur with symmetric edge padding."""
    if sigma_blur < 0:
        raise ValueError("sigma_blur must be >= 0")
    image = np.asarray(image, dtype=np.float64)
    if sigma_blur == 0:
        return np.clip(np.round(image), 0, 255)
    k = gaussian_kernel(sigma_blur)[:, :, None]
    # scipy "reflect" repeats the edge sample, i.e. symmetric padding
    out = correlate(image, k, mode="reflect")
    return np.clip(np.round(out), 0, 255)
