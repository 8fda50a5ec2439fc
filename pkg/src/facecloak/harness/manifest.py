"""Line-delimited JSON dataset manifests.

The first line is a header object, every following line one image record::

    {"schema": "facecloak.manifest", "version": 1, "image_size": [128, 128]}
    {"image": "images/00000.png", "boxes": [[x, y, w, h], ...], "split": "train"}

Image paths are stored relative to the manifest's directory.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from facecloak.geometry import BoundingBox

SCHEMA = "facecloak.manifest"
VERSION = 1


class ManifestError(ValueError):
    """Raised for malformed manifests; ``index`` is the offending record (0-based) if any."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"record {index}: {message}")
        self.index = index


class SchemaVersionError(ManifestError):
    pass


@dataclass
class Record:
    image: str
    boxes: list[BoundingBox]
    split: str = "all"


@dataclass
class DatasetManifest:
    records: list[Record]
    image_size: tuple[int, int]  # (width, height)
    root: Path = field(default_factory=Path)

    def image_path(self, record: Record) -> Path:
        return self.root / record.image

    def load_image(self, record: Record) -> np.ndarray:
        with Image.open(self.image_path(record)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64)

    def split(self, tag: str) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if r.split == tag], self.image_size, self.root)

    def __len__(self):
        return len(self.records)


def atomic_write_text(path: Path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_manifest(manifest: DatasetManifest) -> str:
    lines = [json.dumps({"schema": SCHEMA, "version": VERSION, "image_size": list(manifest.image_size)})]
    for r in manifest.records:
        lines.append(
            json.dumps({"image": r.image, "boxes": [list(b.as_tuple()) for b in r.boxes], "split": r.split})
        )
    return "\n".join(lines) + "\n"


def write_manifest(manifest: DatasetManifest, path: Path) -> None:
    atomic_write_text(Path(path), dumps_manifest(manifest))


def load_manifest(path, check_images: bool = True) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"{path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"bad header: {exc}") from exc
    if header.get("schema") != SCHEMA:
        raise ManifestError(f"not a {SCHEMA} file: {path}")
    if header.get("version") != VERSION:
        raise SchemaVersionError(f"manifest version {header.get('version')} unsupported (expected {VERSION})")
    width, height = header["image_size"]

    records = []
    for i, line in enumerate(lines[1:]):
        try:
            raw = json.loads(line)
            boxes = [BoundingBox(*map(float, b)) for b in raw["boxes"]]
            rec = Record(str(raw["image"]), boxes, str(raw.get("split", "all")))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ManifestError(str(exc), index=i) from exc
        if check_images:
            img = path.parent / rec.image
            try:
                with Image.open(img) as im:
                    im.verify()
            except (OSError, SyntaxError) as exc:
                raise ManifestError(f"image {img} missing or undecodable: {exc}", index=i) from exc
        records.append(rec)
    return DatasetManifest(records, (int(width), int(height)), path.parent)
