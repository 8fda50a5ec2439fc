"""Adversarial perturbations that disrupt differentiable face detectors."""

__version__ = "0.1.0"
