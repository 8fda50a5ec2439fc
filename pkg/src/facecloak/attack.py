"""Perturbations that suppress true face detections and promote false ones.

The objective for one detector, with the proposal partition frozen, is::

    L(z) = sum_{j in td} log(1 - c_j(I0 + z)) + sum_{j in fd} log c_j(I0 + z)

where ``td`` are proposals overlapping the detector's own face detections and
``fd`` the most confident of the remaining proposals. It is maximized by
gradient ascent under a mean-square budget on ``z / 255``. After every step
the detector is re-run on the perturbed image and the partition rebuilt.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from facecloak.detector.model import ProposalSet, ToyDetector
from facecloak.geometry import boxes_to_array, iou_matrix

logger = logging.getLogger(__name__)

SCORE_CLAMP = 1e-7
ITERS_EXHAUSTED = "iters_exhausted"
NO_TRUE_PROPOSALS = "no_true_proposals"


@dataclass
class AttackConfig:
    epsilon: float = 5e-5
    max_outer_iters: int = 200
    theta_d: float = 0.5
    theta_p: float = 0.3
    rho: int = 1000
    step_scale: float = 30.0
    sigma: float = 0.0
    seed: int = 0
    max_halvings: int = 10
    stall_limit: int = 5
    budget_projection: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not 0 < self.theta_p < 1:
            raise ValueError("theta_p must lie in (0, 1)")
        if not 0 < self.theta_d < 1:
            raise ValueError("theta_d must lie in (0, 1)")
        if self.rho < 1:
            raise ValueError("rho must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.max_outer_iters < 0:
            raise ValueError("max_outer_iters must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProposalPartition:
    td: np.ndarray  # indices of potential true detections
    fd: np.ndarray  # top-rho potential false detections

    @classmethod
    def empty(cls) -> "ProposalPartition":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))


@dataclass
class AttackRun:
    original: np.ndarray
    current: np.ndarray
    outer_iter: int = 0
    objective_trace: list[float] = field(default_factory=list)  # after each step
    objective_before: list[float] = field(default_factory=list)  # same partition, before the step
    step_trace: list[float] = field(default_factory=list)
    budget_trace: list[float] = field(default_factory=list)
    termination_reason: str = ITERS_EXHAUSTED
    stalled: bool = False
    models: list[str] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def perturbation(self) -> np.ndarray:
        return self.current - self.original

    def budget_used(self) -> float:
        return mean_square(self.perturbation)

    def exported(self) -> np.ndarray:
        """8-bit perturbed image."""
        return np.clip(np.round(self.current), 0, 255).astype(np.uint8)

    def metadata(self) -> dict:
        return {
            "models": self.models,
            "termination_reason": self.termination_reason,
            "stalled": self.stalled,
            "iterations": self.outer_iter,
            "final_objective": self.objective_trace[-1] if self.objective_trace else None,
            "budget_used": self.budget_used(),
            "budget_used_exported": mean_square(self.exported().astype(np.float64) - self.original),
            "seconds": self.seconds,
        }


def mean_square(z: np.ndarray) -> float:
    """Mean square of a 0-255 scale perturbation after normalizing to [0, 1]."""
    return float(np.mean((np.asarray(z, dtype=np.float64) / 255.0) ** 2))


def partition_proposals(proposals: ProposalSet, attack_gt, cfg: AttackConfig) -> ProposalPartition:
    """Split proposals into potential true detections and the top-rho false ones."""
    n = len(proposals)
    if n == 0:
        return ProposalPartition.empty()
    gt = boxes_to_array(attack_gt)
    if len(gt):
        best = iou_matrix(proposals.boxes, gt).max(axis=1)
        is_td = best >= cfg.theta_p
    else:
        is_td = np.zeros(n, dtype=bool)
    td = np.flatnonzero(is_td)
    cand = np.flatnonzero(~is_td)
    order = np.argsort(-proposals.scores[cand], kind="stable")
    fd = np.sort(cand[order[: cfg.rho]])
    return ProposalPartition(td, fd)


def _clamp(scores) -> np.ndarray:
    return np.clip(np.asarray(scores, dtype=np.float64), SCORE_CLAMP, 1 - SCORE_CLAMP)


def objective(scores_td, scores_fd) -> float:
    return float(np.sum(np.log1p(-_clamp(scores_td))) + np.sum(np.log(_clamp(scores_fd))))


def partition_objective(scores: np.ndarray, partition: ProposalPartition) -> float:
    return objective(scores[partition.td], scores[partition.fd])


def chain_rule_weights(scores: np.ndarray, partition: ProposalPartition) -> np.ndarray:
    """Per-proposal weights on d(score)/dI that give the gradient of the objective."""
    c = _clamp(scores)
    w = np.zeros(len(c), dtype=np.float64)
    w[partition.fd] = 1.0 / c[partition.fd]
    w[partition.td] = -1.0 / (1.0 - c[partition.td])
    return w


def objective_gradient(model: ToyDetector, image, partition: ProposalPartition, scores=None) -> np.ndarray:
    """Gradient of the partition objective with respect to the image.

    ``scores`` are the current proposal confidences if already known; they
    only set the per-proposal weights of the single backward pass.
    """
    image = np.asarray(image, dtype=np.float64)
    if len(partition.td) == 0 and len(partition.fd) == 0:
        return np.zeros_like(image)
    if scores is None:
        scores = model.scores(image)[0]
    return model.input_gradient(image, chain_rule_weights(scores, partition))


@dataclass
class _Member:
    model: ToyDetector
    clean_gt: np.ndarray
    partition: ProposalPartition = field(default_factory=ProposalPartition.empty)


def project_to_budget(z: np.ndarray, epsilon: float) -> np.ndarray:
    """Euclidean projection onto ``{z : mean_square(z) <= epsilon}``."""
    ms = mean_square(z)
    if ms <= epsilon:
        return z
    return z * (np.sqrt(epsilon / ms) * (1 - 1e-9))


def _budget_gamma(z: np.ndarray, g: np.ndarray, limit: float) -> float:
    """Largest gamma with ||z + gamma g||^2 <= limit (0 if none is positive)."""
    gg = float(np.vdot(g, g))
    zg = float(np.vdot(z, g))
    zz = float(np.vdot(z, z))
    disc = zg * zg - gg * (zz - limit)
    if gg == 0 or disc < 0:
        return 0.0
    return max((-zg + np.sqrt(disc)) / gg, 0.0)


def ensemble_objective(members: Sequence[_Member], image) -> float:
    return sum(partition_objective(m.model.scores(image)[0], m.partition) for m in members)


def line_search_step(run: AttackRun, gradient: np.ndarray, cfg: AttackConfig, evaluate, current_value: float):
    """Backtracking step along ``gradient``.

    ``evaluate(image)`` returns the objective with the partition frozen. The
    first candidate is ``step_scale / ||gradient||``, shrunk to the budget
    boundary if needed, then halved until the objective increases. Returns
    ``(gamma, new_value)``; ``gamma == 0`` means the step stalled and ``run``
    is left unchanged.
    """
    norm = float(np.linalg.norm(gradient))
    if norm == 0 or not np.isfinite(norm):
        return 0.0, current_value
    z = run.perturbation
    limit = cfg.epsilon * 255.0**2 * z.size
    gamma = cfg.step_scale / norm
    if mean_square(z + gamma * gradient) > cfg.epsilon and not cfg.budget_projection:
        gamma = _budget_gamma(z, gradient, limit) * (1 - 1e-9)
    for _ in range(cfg.max_halvings + 1):
        if gamma <= 0:
            break
        cand_z = z + gamma * gradient
        if cfg.budget_projection:
            cand_z = project_to_budget(cand_z, cfg.epsilon)
        if mean_square(cand_z) <= cfg.epsilon:
            candidate = np.clip(run.original + cand_z, 0.0, 255.0)
            value = evaluate(candidate)
            if value > current_value:
                run.current = candidate
                return gamma, value
        gamma *= 0.5
    return 0.0, current_value


def _track_faces(model: ToyDetector, proposals: ProposalSet, clean_gt: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Detections on the current image that still cover one of the clean faces."""
    dets = model._postprocess(proposals.boxes, proposals.scores, cfg.theta_d)
    if not dets or len(clean_gt) == 0:
        return np.zeros((0, 4))
    boxes = boxes_to_array([b for b, _ in dets])
    keep = iou_matrix(boxes, clean_gt).max(axis=1) >= cfg.theta_p
    return boxes[keep]


def _refresh(mem: _Member, props: ProposalSet, cfg: AttackConfig) -> np.ndarray:
    """Warm start: re-derive attack ground truth and partition, return chain-rule weights."""
    faces = _track_faces(mem.model, props, mem.clean_gt, cfg)
    mem.partition = partition_proposals(props, faces, cfg)
    return chain_rule_weights(props.scores, mem.partition)


def _run(models: Sequence[ToyDetector], image, cfg: AttackConfig) -> AttackRun:
    if len(models) < 1:
        raise ValueError("need at least one detector")
    start = time.perf_counter()
    original = np.asarray(image, dtype=np.float64)
    run = AttackRun(original=original, current=original.copy(), models=[m.name for m in models])
    rng = np.random.default_rng(cfg.seed)
    members = []
    for m in models:
        try:
            gt = boxes_to_array([b for b, _ in m.detect(original, theta_d=cfg.theta_d)])
        except Exception as exc:
            raise RuntimeError(f"detector {m.name} failed: {exc}") from exc
        members.append(_Member(m, gt))

    stalls = 0
    for t in range(cfg.max_outer_iters):
        run.outer_iter = t + 1
        grad = np.zeros_like(original)
        value = 0.0
        any_td = False
        for mem in members:
            try:
                props, g = mem.model.propose_with_gradient(run.current, lambda p, mem=mem: _refresh(mem, p, cfg))
            except Exception as exc:
                raise RuntimeError(f"detector {mem.model.name} failed: {exc}") from exc
            any_td |= len(mem.partition.td) > 0
            value += partition_objective(props.scores, mem.partition)
            grad += g
        if not any_td:
            run.termination_reason = NO_TRUE_PROPOSALS
            break
        if cfg.sigma > 0:
            rms = float(np.sqrt(np.mean(grad**2)))
            grad = grad + rng.normal(0.0, cfg.sigma * rms, size=grad.shape)
        gamma, new_value = line_search_step(run, grad, cfg, lambda img: ensemble_objective(members, img), value)
        run.step_trace.append(gamma)
        run.objective_before.append(value)
        run.objective_trace.append(new_value)
        run.budget_trace.append(run.budget_used())
        if gamma == 0:
            stalls += 1
            if stalls >= cfg.stall_limit:
                run.stalled = True
                run.termination_reason = ITERS_EXHAUSTED
                break
        else:
            stalls = 0
    run.seconds = time.perf_counter() - start
    logger.debug("attack %s: %s after %d iterations", run.models, run.termination_reason, run.outer_iter)
    return run


def white_box_attack(model: ToyDetector, image, cfg: AttackConfig | None = None) -> AttackRun:
    """Attack with exact gradients of ``model``; ``cfg.sigma`` is ignored."""
    cfg = cfg or AttackConfig()
    if cfg.sigma != 0:
        cfg = AttackConfig(**{**cfg.to_dict(), "sigma": 0.0})
    return _run([model], image, cfg)


def gray_box_attack(model: ToyDetector, image, cfg: AttackConfig) -> AttackRun:
    """White-box attack with Gaussian noise (std ``sigma`` x gradient RMS) added to every gradient."""
    return _run([model], image, cfg)


def ensemble_attack(models: Sequence[ToyDetector], image, cfg: AttackConfig | None = None) -> AttackRun:
    """Maximize the sum of per-detector objectives under one shared budget."""
    return _run(list(models), image, cfg or AttackConfig())
