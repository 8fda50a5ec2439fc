import os

import numpy as np
import pytest
import torch

from facecloak.detector.fixture import FixtureConfig, build_detectors, eval_split, train_split
from facecloak.detector.model import AnchorGridNet, ToyDetector


@pytest.fixture(scope="session")
def fixture_cfg():
    return FixtureConfig()


@pytest.fixture(scope="session")
def fixture_models(request, fixture_cfg):
    """Trained detectors A, B, C and fine-tuned A*; checkpoints cached between sessions."""
    cache = os.environ.get("FACECLOAK_FIXTURE_CACHE") or request.config.cache.mkdir("facecloak-fixture")
    return build_detectors(fixture_cfg, cache)


@pytest.fixture(scope="session")
def eval_samples(fixture_cfg):
    return eval_split(fixture_cfg)


@pytest.fixture(scope="session")
def train_samples(fixture_cfg):
    return train_split(fixture_cfg)


def make_probe(seed: int = 0, backbone: str = "A") -> ToyDetector:
    """Untrained float64 detector with smooth activations, for gradient checks."""
    torch.manual_seed(seed)
    net = AnchorGridNet(backbone, activation="smooth").double()
    return ToyDetector(net, backbone, name=f"probe-{backbone}")


@pytest.fixture
def probe():
    return make_probe()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
