from facecloak.detector.model import CheckpointVersionError, ProposalSet, ToyDetector, extract_ground_truth
from facecloak.detector.synthetic import SyntheticFaceSpec, generate_dataset, render_sample, sample_batch
from facecloak.detector.training import TrainConfig, TrainingError, evaluate_recall, finetune, train_toy_detector

__all__ = [
    "CheckpointVersionError",
    "ProposalSet",
    "SyntheticFaceSpec",
    "ToyDetector",
    "TrainConfig",
    "TrainingError",
    "evaluate_recall",
    "extract_ground_truth",
    "finetune",
    "generate_dataset",
    "render_sample",
    "sample_batch",
    "train_toy_detector",
]
