import math

import numpy as np
import pytest

from facecloak.attack import (
    NO_TRUE_PROPOSALS,
    AttackConfig,
    AttackRun,
    ProposalPartition,
    chain_rule_weights,
    ensemble_attack,
    gray_box_attack,
    line_search_step,
    mean_square,
    objective,
    objective_gradient,
    partition_objective,
    partition_proposals,
    project_to_budget,
    white_box_attack,
)
from facecloak.detector.model import ProposalSet
from facecloak.detector.synthetic import SyntheticFaceSpec, render_background
from facecloak.geometry import BoundingBox

from conftest import make_probe
from oracles import central_difference

SHORT = AttackConfig(max_outer_iters=12)


def _proposals(n_face=25, n_other=175, seed=0):
    rng = np.random.default_rng(seed)
    face = np.tile([10.0, 10.0, 20.0, 24.0], (n_face, 1)) + rng.uniform(-1, 1, (n_face, 4))
    other = np.column_stack([rng.uniform(60, 100, (n_other, 2)), np.full((n_other, 2), 20.0)])
    return ProposalSet(np.vstack([face, other]), rng.uniform(0, 1, n_face + n_other))


def test_partition_splits_on_overlap():
    props = _proposals()
    part = partition_proposals(props, [BoundingBox(10, 10, 20, 24)], AttackConfig())
    assert len(part.td) == 25 and len(part.fd) == 175
    assert set(part.td).isdisjoint(part.fd)


def test_partition_keeps_top_rho():
    props = _proposals()
    part = partition_proposals(props, [BoundingBox(10, 10, 20, 24)], AttackConfig(rho=10))
    others = np.arange(25, 200)
    top = others[np.argsort(-props.scores[others])[:10]]
    assert sorted(part.fd) == sorted(top)


def test_partition_without_faces_has_no_td():
    part = partition_proposals(_proposals(), [], AttackConfig())
    assert len(part.td) == 0 and len(part.fd) == 200


def test_objective_examples():
    assert objective([0.5], []) == pytest.approx(math.log(0.5), abs=1e-12)
    assert objective([0.5], []) == pytest.approx(-0.6931, abs=1e-4)
    assert objective([], [0.01]) == pytest.approx(-4.6052, abs=1e-4)
    assert objective([0.2, 0.9], [0.3]) == pytest.approx(math.log(0.8) + math.log(0.1) + math.log(0.3))


def test_objective_clamped_at_extremes():
    assert objective([1.0], [0.0]) == pytest.approx(2 * math.log(1e-7), rel=1e-6)


def test_chain_rule_weights_are_log_derivatives():
    scores = np.array([0.2, 0.7, 0.4])
    part = ProposalPartition(np.array([0]), np.array([2]))
    w = chain_rule_weights(scores, part)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (partition_objective(scores + e, part) - partition_objective(scores - e, part)) / (2 * h)
        assert w[k] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def _probe_case(seed, size=24):
    model = make_probe(seed=seed, backbone="ABC"[seed % 3])
    rng = np.random.default_rng(seed)
    img = rng.uniform(30, 225, (size, size, 3))
    n = len(model.propose(img))
    idx = rng.permutation(n)
    return model, img, ProposalPartition(np.sort(idx[:4]), np.sort(idx[4:12]))


@pytest.mark.parametrize("seed", range(3))
def test_objective_gradient_matches_finite_differences(seed):
    model, img, part = _probe_case(seed, size=16)
    grad = objective_gradient(model, img, part)
    f = lambda x: partition_objective(model.scores(x)[0], part)
    fd = central_difference(f, img.copy(), 1e-3)
    assert np.linalg.norm(grad - fd) <= 1e-3 * np.linalg.norm(fd)


def test_empty_partition_has_zero_gradient():
    model, img, _ = _probe_case(0)
    assert not objective_gradient(model, img, ProposalPartition.empty()).any()


def test_gradient_additive_over_partition():
    model, img, part = _probe_case(1)
    g = objective_gradient(model, img, part)
    g_td = objective_gradient(model, img, ProposalPartition(part.td, np.zeros(0, int)))
    g_fd = objective_gradient(model, img, ProposalPartition(np.zeros(0, int), part.fd))
    assert np.allclose(g, g_td + g_fd, atol=1e-10)


def _linear_setup(shape=(8, 8, 3)):
    rng = np.random.default_rng(0)
    g = rng.normal(size=shape)
    run = AttackRun(original=np.full(shape, 128.0), current=np.full(shape, 128.0))
    return run, g, (lambda img: float(np.vdot(img - 128.0, g)))


def test_line_search_zero_gradient_stalls():
    run, g, ev = _linear_setup()
    gamma, value = line_search_step(run, np.zeros_like(g), AttackConfig(), ev, 0.0)
    assert gamma == 0 and value == 0 and np.array_equal(run.current, run.original)


def test_line_search_accepts_small_first_step():
    run, g, ev = _linear_setup()
    cfg = AttackConfig(step_scale=1e-3, epsilon=1.0)
    gamma, value = line_search_step(run, g, cfg, ev, 0.0)
    assert gamma == pytest.approx(1e-3 / np.linalg.norm(g))
    assert value > 0


def test_line_search_halves_until_ascent():
    run, g, _ = _linear_setup()
    # objective rises only for tiny steps
    ev = lambda img: -abs(np.vdot(img - 128.0, g) - 1e-3)
    cfg = AttackConfig(step_scale=1.0, epsilon=1.0, max_halvings=20)
    gamma, value = line_search_step(run, g, cfg, ev, -1e-3)
    assert 0 < gamma < 1.0 / np.linalg.norm(g)
    assert value > -1e-3


@pytest.mark.parametrize("projection", [False, True])
def test_line_search_tight_budget_without_ascent_stalls(projection):
    run, g, _ = _linear_setup()
    cfg = AttackConfig(epsilon=1e-6, budget_projection=projection)
    z = g / np.sqrt(mean_square(g)) * np.sqrt(cfg.epsilon)
    run.current = run.original + z
    assert mean_square(run.perturbation) == pytest.approx(cfg.epsilon)
    before = run.current.copy()
    ev = lambda img: -float(np.sum((img - before) ** 2))  # any move from here loses
    gamma, value = line_search_step(run, g, cfg, ev, ev(run.current))
    assert gamma == 0.0 and value == ev(before)
    assert np.array_equal(run.current, before)


def test_line_search_literal_mode_shrinks_to_boundary():
    run, g, ev = _linear_setup()
    cfg = AttackConfig(epsilon=1e-6, step_scale=1e3, budget_projection=False)
    gamma, value = line_search_step(run, g, cfg, ev, 0.0)
    assert gamma > 0 and value > 0
    assert mean_square(run.perturbation) <= cfg.epsilon
    assert mean_square(run.perturbation) == pytest.approx(cfg.epsilon, rel=1e-6)


def test_projection_onto_budget_ball():
    z = np.random.default_rng(1).normal(0, 10, (10, 10, 3))
    p = project_to_budget(z, 1e-4)
    assert mean_square(p) <= 1e-4
    assert np.allclose(p / np.linalg.norm(p), z / np.linalg.norm(z))
    small = z * 1e-3
    assert project_to_budget(small, 1e-4) is small


def test_config_validation():
    for bad in ({"epsilon": 0}, {"theta_p": 1.0}, {"rho": 0}, {"sigma": -1}, {"max_outer_iters": -1}):
        with pytest.raises(ValueError):
            AttackConfig(**bad)


def test_no_faces_terminates_immediately(fixture_models):
    bg = render_background(SyntheticFaceSpec(), np.random.default_rng(5)).astype(float)
    model = fixture_models["A"]
    assert model.detect(bg) == []
    run = white_box_attack(model, bg, AttackConfig())
    assert run.termination_reason == NO_TRUE_PROPOSALS
    assert run.outer_iter == 1
    assert np.array_equal(run.current, bg)


def test_zero_iterations_is_identity(fixture_models, eval_samples):
    img = eval_samples[0][0].astype(float)
    run = white_box_attack(fixture_models["A"], img, AttackConfig(max_outer_iters=0))
    assert run.outer_iter == 0 and np.array_equal(run.current, img)
    assert run.termination_reason == "iters_exhausted"


@pytest.fixture(scope="module")
def white_run(fixture_models, eval_samples):
    return white_box_attack(fixture_models["A"], eval_samples[0][0].astype(float), SHORT)


def test_white_box_respects_budget_and_ascends(white_run):
    assert white_run.step_trace
    assert all(b <= SHORT.epsilon + 1e-12 for b in white_run.budget_trace)
    for gamma, before, after in zip(white_run.step_trace, white_run.objective_before, white_run.objective_trace):
        assert after > before if gamma > 0 else after == before
    assert white_run.current.min() >= 0 and white_run.current.max() <= 255
    out = white_run.exported()
    assert out.dtype == np.uint8


def test_white_box_is_deterministic(white_run, fixture_models, eval_samples):
    again = white_box_attack(fixture_models["A"], eval_samples[0][0].astype(float), SHORT)
    assert np.array_equal(again.current, white_run.current)


def test_gray_box_zero_sigma_equals_white(white_run, fixture_models, eval_samples):
    gray = gray_box_attack(fixture_models["A"], eval_samples[0][0].astype(float), AttackConfig(max_outer_iters=12, sigma=0.0))
    assert np.array_equal(gray.exported(), white_run.exported())


def test_gray_box_seeded(fixture_models, eval_samples):
    img = eval_samples[1][0].astype(float)
    cfg = AttackConfig(max_outer_iters=4, sigma=0.5, seed=3)
    a = gray_box_attack(fixture_models["A"], img, cfg)
    b = gray_box_attack(fixture_models["A"], img, cfg)
    c = gray_box_attack(fixture_models["A"], img, AttackConfig(max_outer_iters=4, sigma=0.5, seed=4))
    assert np.array_equal(a.current, b.current)
    assert not np.array_equal(a.current, c.current)


def test_single_member_ensemble_equals_white(white_run, fixture_models, eval_samples):
    ens = ensemble_attack([fixture_models["A"]], eval_samples[0][0].astype(float), SHORT)
    assert np.array_equal(ens.current, white_run.current)


def test_ensemble_objective_is_sum(fixture_models, eval_samples):
    img = eval_samples[2][0].astype(float)
    run_ab = ensemble_attack([fixture_models["A"], fixture_models["B"]], img, AttackConfig(max_outer_iters=1))
    run_a = white_box_attack(fixture_models["A"], img, AttackConfig(max_outer_iters=1))
    run_b = white_box_attack(fixture_models["B"], img, AttackConfig(max_outer_iters=1))
    assert run_ab.objective_before[0] == pytest.approx(run_a.objective_before[0] + run_b.objective_before[0])
    assert run_ab.models == [fixture_models["A"].name, fixture_models["B"].name]
