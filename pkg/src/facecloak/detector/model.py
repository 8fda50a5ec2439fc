"""Single-shot anchor-grid face detectors with input gradients."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from facecloak.geometry import BoundingBox, nms

CHECKPOINT_FORMAT = "facecloak.detector"
CHECKPOINT_VERSION = 1
NMS_IOU = 0.3
STRIDE = 8
ANCHOR_SIZES = ((18.0, 22.0), (23.0, 29.0), (29.0, 37.0))  # (w, h)

# backbone tag -> (channels per stride-2 stage, convs per stage, head convs, head width)
BACKBONES = {
    "A": ((16, 32, 48), 1, 2, 48),
    "B": ((24, 40, 64), 2, 2, 64),
    "C": ((12, 24, 40), 1, 3, 56),
}


class CheckpointVersionError(ValueError):
    pass


def _activation(kind: str) -> nn.Module:
    if kind == "leaky":
        return nn.LeakyReLU(0.1)
    if kind == "smooth":
        return nn.Softplus(beta=4.0)
    raise ValueError(f"unknown activation {kind!r}")


class AnchorGridNet(nn.Module):
    def __init__(self, backbone: str = "A", activation: str = "leaky"):
        super().__init__()
        if backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {backbone!r}; choose from {sorted(BACKBONES)}")
        channels, per_stage, head_convs, head_width = BACKBONES[backbone]
        layers: list[nn.Module] = []
        c_in = 3
        for c in channels:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), _activation(activation)]
            for _ in range(per_stage - 1):
                layers += [nn.Conv2d(c, c, 3, padding=1), _activation(activation)]
            c_in = c
        self.features = nn.Sequential(*layers)
        head: list[nn.Module] = []
        for _ in range(head_convs):
            head += [nn.Conv2d(c_in, head_width, 3, padding=1), _activation(activation)]
            c_in = head_width
        self.neck = nn.Sequential(*head)
        self.head = nn.Conv2d(c_in, len(ANCHOR_SIZES) * 5, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``x`` is NCHW on the 0-255 scale. Returns logits (N, A) and offsets (N, A, 4)."""
        h = self.neck(self.features(x / 127.5 - 1.0))
        out = self.head(h)  # N, K*5, gh, gw
        n, _, gh, gw = out.shape
        out = out.view(n, len(ANCHOR_SIZES), 5, gh, gw).permute(0, 3, 4, 1, 2).reshape(n, -1, 5)
        return out[..., 0], out[..., 1:]


def make_anchors(width: int, height: int) -> np.ndarray:
    """Anchor boxes ``(x, y, w, h)`` ordered row-major over the grid, then by size."""
    gh, gw = -(-height // STRIDE), -(-width // STRIDE)
    cy, cx = np.mgrid[0:gh, 0:gw] * STRIDE + STRIDE / 2
    rows = []
    for y, x in zip(cy.ravel(), cx.ravel()):
        for w, h in ANCHOR_SIZES:
            rows.append((x - w / 2, y - h / 2, w, h))
    return np.asarray(rows, dtype=np.float64)


def decode(anchors: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    acx = anchors[:, 0] + anchors[:, 2] / 2
    acy = anchors[:, 1] + anchors[:, 3] / 2
    cx = acx + offsets[..., 0] * anchors[:, 2]
    cy = acy + offsets[..., 1] * anchors[:, 3]
    w = anchors[:, 2] * np.exp(np.clip(offsets[..., 2], -3, 3))
    h = anchors[:, 3] * np.exp(np.clip(offsets[..., 3], -3, 3))
    return np.stack([cx - w / 2, cy - h / 2, w, h], axis=-1)


def encode(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    acx = anchors[:, 0] + anchors[:, 2] / 2
    acy = anchors[:, 1] + anchors[:, 3] / 2
    gcx = boxes[:, 0] + boxes[:, 2] / 2
    gcy = boxes[:, 1] + boxes[:, 3] / 2
    return np.stack(
        [(gcx - acx) / anchors[:, 2], (gcy - acy) / anchors[:, 3], np.log(boxes[:, 2] / anchors[:, 2]), np.log(boxes[:, 3] / anchors[:, 3])],
        axis=-1,
    )


@dataclass
class ProposalSet:
    """Every anchor's decoded box and face confidence, no suppression applied."""

    boxes: np.ndarray  # (n, 4) x, y, w, h
    scores: np.ndarray  # (n,)

    def __len__(self):
        return len(self.scores)

    def __iter__(self):
        for b, c in zip(self.boxes, self.scores):
            yield _safe_box(b), float(c)


def _safe_box(row) -> BoundingBox:
    x, y, w, h = (float(v) for v in row)
    return BoundingBox(x, y, max(w, 1e-6), max(h, 1e-6))


def _to_tensor(images, dtype) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


class ToyDetector:
    """Differentiable face detector wrapping an :class:`AnchorGridNet`.

    Images are ``H x W x 3`` arrays on the continuous 0-255 scale.
    """

    def __init__(self, net: AnchorGridNet, backbone: str, name: str | None = None, theta_d: float = 0.5, nms_iou: float = NMS_IOU):
        self.net = net.eval()
        self.backbone = backbone
        self.name = name or f"toy-{backbone}"
        self.theta_d = theta_d
        self.nms_iou = nms_iou
        self._anchors: dict[tuple[int, int], np.ndarray] = {}

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def anchors(self, width: int, height: int) -> np.ndarray:
        key = (width, height)
        if key not in self._anchors:
            self._anchors[key] = make_anchors(width, height)
        return self._anchors[key]

    def forward(self, images) -> tuple[np.ndarray, np.ndarray]:
        """Batched proposals: boxes (N, A, 4) and scores (N, A)."""
        x = _to_tensor(images, self.dtype)
        with torch.no_grad():
            logits, offsets = self.net(x)
        anchors = self.anchors(x.shape[3], x.shape[2])
        boxes = decode(anchors, offsets.double().numpy())
        return boxes, torch.sigmoid(logits).double().numpy()

    def propose(self, image) -> ProposalSet:
        boxes, scores = self.forward(image)
        return ProposalSet(boxes[0], scores[0])

    def scores(self, images) -> np.ndarray:
        x = _to_tensor(images, self.dtype)
        with torch.no_grad():
            logits, _ = self.net(x)
        return torch.sigmoid(logits).double().numpy()

    def _postprocess(self, boxes: np.ndarray, scores: np.ndarray, theta_d: float | None):
        thr = self.theta_d if theta_d is None else theta_d
        idx = np.flatnonzero(scores >= thr)
        if idx.size == 0:
            return []
        keep = idx[nms(boxes[idx], scores[idx], self.nms_iou)]
        return [(_safe_box(boxes[k]), float(scores[k])) for k in keep]

    def detect(self, image, theta_d: float | None = None) -> list[tuple[BoundingBox, float]]:
        """Final detections: confidence >= theta_d, then NMS."""
        p = self.propose(image)
        return self._postprocess(p.boxes, p.scores, theta_d)

    def detect_batch(self, images, theta_d: float | None = None, batch_size: int = 32):
        out = []
        for i in range(0, len(images), batch_size):
            boxes, scores = self.forward(np.stack(images[i : i + batch_size]))
            out += [self._postprocess(b, s, theta_d) for b, s in zip(boxes, scores)]
        return out

    def input_gradient(self, image, weights) -> np.ndarray:
        """Gradient w.r.t. the image of ``sum_j weights[j] * score_j``."""
        grad, _ = self.scores_and_gradient(image, weights)
        return grad

    def scores_and_gradient(self, image, weights) -> tuple[np.ndarray, np.ndarray]:
        x = _to_tensor(image, self.dtype).requires_grad_(True)
        logits, _ = self.net(x)
        scores = torch.sigmoid(logits[0])
        w = torch.as_tensor(np.asarray(weights, dtype=np.float64), dtype=self.dtype)
        (scores * w).sum().backward()
        grad = x.grad[0].permute(1, 2, 0).double().numpy()
        return grad, scores.detach().double().numpy()

    def propose_with_gradient(self, image, weight_fn) -> tuple[ProposalSet, np.ndarray]:
        """Proposals plus the gradient of ``sum_j w_j * score_j`` from one forward pass.

        ``weight_fn(proposals)`` picks the weights after seeing the proposals.
        """
        x = _to_tensor(image, self.dtype).requires_grad_(True)
        logits, offsets = self.net(x)
        scores = torch.sigmoid(logits[0])
        anchors = self.anchors(x.shape[3], x.shape[2])
        props = ProposalSet(decode(anchors, offsets[0].detach().double().numpy()), scores.detach().double().numpy())
        w = np.asarray(weight_fn(props), dtype=np.float64)
        if not w.any():
            return props, np.zeros(x.shape[2:] + (3,), dtype=np.float64)
        (scores * torch.as_tensor(w, dtype=self.dtype)).sum().backward()
        return props, x.grad[0].permute(1, 2, 0).double().numpy()

    def feature_maps(self, image) -> np.ndarray:
        with torch.no_grad():
            f = self.net.neck(self.net.features(_to_tensor(image, self.dtype) / 127.5 - 1.0))
        return f[0].double().numpy()

    def with_activation(self, activation: str, dtype: torch.dtype = torch.float64) -> "ToyDetector":
        """Copy with the same weights but another activation (e.g. the smooth probe)."""
        net = AnchorGridNet(self.backbone, activation)
        net.load_state_dict(self.net.state_dict())
        return ToyDetector(net.to(dtype), self.backbone, f"{self.name}-{activation}", self.theta_d, self.nms_iou)

    def parameters_vector(self) -> np.ndarray:
        return torch.cat([p.detach().reshape(-1).double() for p in self.net.parameters()]).numpy()

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(
            {
                "format": CHECKPOINT_FORMAT,
                "version": CHECKPOINT_VERSION,
                "backbone": self.backbone,
                "name": self.name,
                "theta_d": self.theta_d,
                "nms_iou": self.nms_iou,
                "state_dict": self.net.state_dict(),
            },
            tmp,
        )
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "ToyDetector":
        ckpt = torch.load(path, map_location="cpu", weights_only=True)
        if ckpt.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a detector checkpoint")
        if ckpt.get("version") != CHECKPOINT_VERSION:
            raise CheckpointVersionError(f"checkpoint version {ckpt.get('version')} unsupported")
        net = AnchorGridNet(ckpt["backbone"])
        net.load_state_dict(ckpt["state_dict"])
        return cls(net, ckpt["backbone"], ckpt["name"], ckpt["theta_d"], ckpt["nms_iou"])


def extract_ground_truth(model: ToyDetector, image, theta_d: float = 0.5) -> list[BoundingBox]:
    """The detector's own confident detections, used as attack ground truth."""
    return [b for b, _ in model.detect(image, theta_d=theta_d)]


def detections_from(models: Sequence[ToyDetector], image):
    return [m.detect(image) for m in models]
