"""Training, evaluation and fine-tuning of the toy detectors."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from facecloak import imageops
from facecloak.detector.model import AnchorGridNet, ToyDetector, encode, make_anchors
from facecloak.geometry import boxes_to_array, iou_matrix, match_detections

logger = logging.getLogger(__name__)

POS_IOU = 0.5
NEG_IOU = 0.35


class TrainingError(RuntimeError):
    """The detector missed its accuracy bar within the training budget."""


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 16
    lr: float = 3e-3
    weight_decay: float = 1e-4
    augment: bool = True
    # soft targets keep confidences away from saturation
    pos_target: float = 0.9
    neg_target: float = 0.1
    noise_max: float = 3.0
    min_recall: float = 0.9
    max_false_per_image: float = 0.1


def assign_targets(anchors: np.ndarray, gt: np.ndarray):
    """Per-anchor labels (1 face, 0 background, -1 ignore) and regression targets."""
    labels = np.zeros(len(anchors), dtype=np.float32)
    targets = np.zeros((len(anchors), 4), dtype=np.float32)
    if len(gt) == 0:
        return labels, targets
    ov = iou_matrix(anchors, gt)
    best_gt = ov.argmax(axis=1)
    best = ov.max(axis=1)
    labels[(best >= NEG_IOU) & (best < POS_IOU)] = -1
    labels[best >= POS_IOU] = 1
    # every face gets at least its best anchor
    for g, a in enumerate(ov.argmax(axis=0)):
        labels[a] = 1
        best_gt[a] = g
    pos = labels == 1
    targets[pos] = encode(anchors[pos], gt[best_gt[pos]])
    return labels, targets


def augment(image: np.ndarray, rng: np.random.Generator, noise_max: float = 3.0) -> np.ndarray:
    """Random photometric degradation so clean accuracy survives JPEG, noise and blur."""
    out = image.astype(np.float64)
    r = rng.random()
    if r < 0.2:
        out = imageops.apply_blur(out, rng.uniform(0.5, 4.0))
    elif r < 0.4:
        out = imageops.apply_noise(out, rng.uniform(0.0, noise_max), rng.integers(2**31))
    elif r < 0.6:
        out = imageops.apply_jpeg(out, int(rng.integers(60, 101)))
    if rng.random() < 0.5:
        out = out * rng.uniform(0.85, 1.15) + rng.uniform(-15, 15)
    return np.clip(out, 0, 255)


def _fit(net: AnchorGridNet, samples, cfg: TrainConfig, seed: int, epochs: int):
    if epochs <= 0:
        return
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    size = samples[0][0].shape[:2]
    anchors = make_anchors(size[1], size[0])
    prepared = [assign_targets(anchors, boxes_to_array(b)) for _, b in samples]
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps = epochs * -(-len(samples) // cfg.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.lr, total_steps=steps, pct_start=0.15)
    net.train()
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            imgs = []
            for k in idx:
                img = samples[k][0]
                if cfg.augment:
                    img = augment(img, rng, cfg.noise_max)
                imgs.append(img)
            x = torch.from_numpy(np.stack(imgs).transpose(0, 3, 1, 2).astype(np.float32))
            labels = torch.from_numpy(np.stack([prepared[k][0] for k in idx]))
            targets = torch.from_numpy(np.stack([prepared[k][1] for k in idx]))
            logits, offsets = net(x)
            valid = labels >= 0
            pos = labels == 1
            n_pos = max(int(pos.sum()), 1)
            soft = torch.where(pos, cfg.pos_target, cfg.neg_target)
            cls = F.binary_cross_entropy_with_logits(logits[valid], soft[valid], reduction="sum") / n_pos
            reg = F.smooth_l1_loss(offsets[pos], targets[pos], beta=0.1, reduction="sum") / n_pos
            loss = cls + reg
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item()
        logger.debug("epoch %d loss %.4f", epoch, total)
    net.eval()


def evaluate_recall(model: ToyDetector, samples, iou_min: float = 0.5) -> tuple[float, float]:
    """Recall and false detections per image on ``(image, boxes)`` samples."""
    dets = model.detect_batch([s[0] for s in samples])
    tp = fp = n = 0
    for d, (_, gt) in zip(dets, samples):
        m = match_detections(d, gt, iou_min)
        tp, fp, n = tp + m.n_true, fp + m.n_false, n + len(gt)
    return tp / max(n, 1), fp / max(len(samples), 1)


def train_toy_detector(backbone: str, samples, seed: int, cfg: TrainConfig | None = None, holdout=None, name=None) -> ToyDetector:
    """Train an anchor-grid detector on ``(image, boxes)`` samples.

    ``holdout`` samples (defaulting to the training set) gate the result:
    recall below ``cfg.min_recall`` or more than ``cfg.max_false_per_image``
    false detections raises :class:`TrainingError`.
    """
    cfg = cfg or TrainConfig()
    if not samples:
        raise ValueError("training set is empty")
    torch.manual_seed(seed)
    net = AnchorGridNet(backbone)
    _fit(net, samples, cfg, seed, cfg.epochs)
    model = ToyDetector(net, backbone, name=name)
    recall, fpi = evaluate_recall(model, holdout if holdout is not None else samples)
    logger.info("%s: recall %.3f, false/image %.3f", model.name, recall, fpi)
    if recall < cfg.min_recall or fpi > cfg.max_false_per_image:
        raise TrainingError(f"{model.name}: recall {recall:.3f}, false/image {fpi:.3f} misses the bar")
    return model


def finetune(model: ToyDetector, samples, seed: int, epochs: int = 5, lr: float = 5e-4, name=None) -> ToyDetector:
    """Continue training a copy of ``model`` on extra data; ``epochs=0`` returns an unchanged copy."""
    if not samples:
        raise ValueError("fine-tuning set is empty")
    net = copy.deepcopy(model.net)
    cfg = TrainConfig(lr=lr)
    _fit(net, samples, cfg, seed, epochs)
    return ToyDetector(net, model.backbone, name or f"{model.name}*", model.theta_d, model.nms_iou)
