"""The standard desk-scale fixture: synthetic splits plus detectors A, B, C and A*.

Training all four detectors takes a few minutes on one CPU core, so
:func:`build_detectors` can cache checkpoints in a directory keyed by the
fixture configuration.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

from facecloak.detector.model import ToyDetector
from facecloak.detector.synthetic import SyntheticFaceSpec, sample_batch
from facecloak.detector.training import TrainConfig, finetune, train_toy_detector

logger = logging.getLogger(__name__)

# bump when training code changes in a way that invalidates cached checkpoints
FIXTURE_VERSION = 3


@dataclass(frozen=True)
class FixtureConfig:
    spec: SyntheticFaceSpec = field(default_factory=SyntheticFaceSpec)
    finetune_spec: SyntheticFaceSpec = field(
        default_factory=lambda: SyntheticFaceSpec(background_seed=7, contrast=(0.6, 0.95))
    )
    n_train: int = 600
    n_holdout: int = 100
    n_eval: int = 50
    n_finetune: int = 300
    train_seed: int = 1
    holdout_seed: int = 2
    eval_seed: int = 3
    finetune_data_seed: int = 4
    model_seed: int = 0
    finetune_seed: int = 5
    finetune_epochs: int = 5
    train: TrainConfig = field(default_factory=TrainConfig)

    def key(self) -> str:
        return hashlib.sha256(f"{FIXTURE_VERSION}:{self!r}".encode()).hexdigest()[:16]


def train_split(cfg: FixtureConfig):
    return sample_batch(cfg.spec, cfg.n_train, cfg.train_seed)


def holdout_split(cfg: FixtureConfig):
    return sample_batch(cfg.spec, cfg.n_holdout, cfg.holdout_seed)


def eval_split(cfg: FixtureConfig):
    return sample_batch(cfg.spec, cfg.n_eval, cfg.eval_seed)


def finetune_split(cfg: FixtureConfig):
    return sample_batch(cfg.finetune_spec, cfg.n_finetune, cfg.finetune_data_seed)


def build_detectors(cfg: FixtureConfig | None = None, cache_dir=None) -> dict[str, ToyDetector]:
    """Detectors ``A``, ``B``, ``C`` and the fine-tuned ``A*``."""
    cfg = cfg or FixtureConfig()
    cache = Path(cache_dir) / cfg.key() if cache_dir else None
    names = {"A": "toy-A", "B": "toy-B", "C": "toy-C", "A*": "toy-A*"}
    if cache and all((cache / f"{n}.pt").exists() for n in names.values()):
        return {k: ToyDetector.load(cache / f"{n}.pt") for k, n in names.items()}

    train, holdout = train_split(cfg), holdout_split(cfg)
    models = {}
    for bb in "ABC":
        logger.info("training detector %s", bb)
        models[bb] = train_toy_detector(bb, train, cfg.model_seed, cfg.train, holdout=holdout, name=names[bb])
    models["A*"] = finetune(models["A"], finetune_split(cfg), cfg.finetune_seed, cfg.finetune_epochs, name=names["A*"])
    if cache:
        for k, m in models.items():
            m.save(cache / f"{names[k]}.pt")
    return models
