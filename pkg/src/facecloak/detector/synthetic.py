"""Synthetic glyph faces on textured backgrounds, with exact ground-truth boxes."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, zoom

from facecloak.geometry import BoundingBox
from facecloak.harness.manifest import DatasetManifest, Record, write_manifest


@dataclass(frozen=True)
class SyntheticFaceSpec:
    image_size: int = 128
    faces_per_image: int = 3
    face_width: tuple[float, float] = (18.0, 30.0)
    aspect: tuple[float, float] = (1.15, 1.35)  # height / width
    contrast: tuple[float, float] = (0.7, 1.0)
    clutter: tuple[int, int] = (3, 7)  # distractor shapes per image
    texture_std: float = 10.0
    background_seed: int = 0


def _background(spec: SyntheticFaceSpec, rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    coarse = rng.uniform(40, 215, size=(4, 4, 3))
    img = zoom(coarse, (s / 4, s / 4, 1), order=1)[:s, :s]
    fine = gaussian_filter(rng.normal(0, 1, size=(s, s, 3)), sigma=(1.2, 1.2, 0))
    img = img + spec.texture_std * fine / fine.std()
    yy, xx = np.mgrid[0:s, 0:s]
    # distractors: blobs and bars without the face layout
    for _ in range(rng.integers(spec.clutter[0], spec.clutter[1] + 1)):
        color = rng.uniform(20, 235, size=3)
        cx, cy = rng.uniform(0, s, size=2)
        if rng.random() < 0.5:
            rx, ry = rng.uniform(4, 16, size=2)
            mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1
        else:
            hw, hh = rng.uniform(2, 14, size=2)
            mask = (np.abs(xx - cx) <= hw) & (np.abs(yy - cy) <= hh)
        img[mask] = 0.3 * img[mask] + 0.7 * color
    return img


def _draw_face(img: np.ndarray, box: BoundingBox, rng: np.random.Generator, contrast: float) -> None:
    s = img.shape[0]
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    cx, cy = box.x + box.w / 2, box.y + box.h / 2
    rx, ry = box.w / 2, box.h / 2
    u, v = (xx - cx) / rx, (yy - cy) / ry

    skin = np.array([rng.uniform(170, 240), rng.uniform(120, 190), rng.uniform(90, 160)])
    head = u**2 + v**2 <= 1
    img[head] = (1 - contrast) * img[head] + contrast * skin

    feature = np.full(3, rng.uniform(10, 60))
    er = rng.uniform(0.13, 0.18)
    ey = rng.uniform(-0.35, -0.2)
    for ex in (-0.38, 0.38):
        eye = ((u - ex) / er) ** 2 + ((v - ey) / (er * box.w / box.h)) ** 2 <= 1
        img[eye] = (1 - contrast) * img[eye] + contrast * feature
    mw, mh = rng.uniform(0.3, 0.45), rng.uniform(0.06, 0.1)
    my = rng.uniform(0.35, 0.5)
    mouth = (np.abs(u) <= mw) & (np.abs(v - my) <= mh)
    img[mouth] = (1 - contrast) * img[mouth] + contrast * feature


def render_sample(spec: SyntheticFaceSpec, rng: np.random.Generator) -> tuple[np.ndarray, list[BoundingBox]]:
    """Render one image (uint8, HxWx3) and its face boxes."""
    img = _background(spec, rng)
    s = spec.image_size
    boxes: list[BoundingBox] = []
    attempts = 0
    while len(boxes) < spec.faces_per_image:
        attempts += 1
        if attempts > 1000:
            raise RuntimeError("could not place faces without overlap; lower faces_per_image or face_width")
        w = rng.uniform(*spec.face_width)
        h = w * rng.uniform(*spec.aspect)
        x, y = rng.uniform(1, s - w - 1), rng.uniform(1, s - h - 1)
        cand = BoundingBox(x, y, w, h)
        # keep a margin so glyphs never touch
        if any(
            cand.x < b.x + b.w + 3 and b.x < cand.x + cand.w + 3 and cand.y < b.y + b.h + 3 and b.y < cand.y + cand.h + 3
            for b in boxes
        ):
            continue
        boxes.append(cand)
    for b in boxes:
        _draw_face(img, b, rng, rng.uniform(*spec.contrast))
    return np.clip(np.round(img), 0, 255).astype(np.uint8), boxes


def render_background(spec: SyntheticFaceSpec, rng: np.random.Generator) -> np.ndarray:
    return np.clip(np.round(_background(spec, rng)), 0, 255).astype(np.uint8)


def sample_batch(spec: SyntheticFaceSpec, count: int, seed: int):
    """In-memory dataset: list of (uint8 image, boxes)."""
    rng = np.random.default_rng([seed, spec.background_seed])
    return [render_sample(spec, rng) for _ in range(count)]


def generate_dataset(
    spec: SyntheticFaceSpec,
    count: int,
    seed: int,
    out_dir,
    split: str = "all",
    holdout_fraction: float = 0.0,
) -> DatasetManifest:
    """Write ``count`` PNG images plus ``manifest.jsonl`` into ``out_dir``.

    With ``holdout_fraction`` > 0 the trailing records are tagged ``test``
    and the rest ``train``. Refuses to touch an existing manifest or image.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out_dir)
    manifest_path = out / "manifest.jsonl"
    if manifest_path.exists():
        raise FileExistsError(f"{manifest_path} already exists")
    (out / "images").mkdir(parents=True, exist_ok=True)
    n_test = int(round(count * holdout_fraction))
    records = []
    for i, (img, boxes) in enumerate(sample_batch(spec, count, seed)):
        rel = f"images/{i:05d}.png"
        if (out / rel).exists():
            raise FileExistsError(f"{out / rel} already exists")
        Image.fromarray(img).save(out / rel, format="PNG")
        tag = split if holdout_fraction <= 0 else ("test" if i >= count - n_test else "train")
        records.append(Record(rel, boxes, tag))
    manifest = DatasetManifest(records, (spec.image_size, spec.image_size), out)
    write_manifest(manifest, manifest_path)
    (out / "spec.json").write_text(__import__("json").dumps({**asdict(spec), "count": count, "seed": seed}, indent=2))
    return manifest
