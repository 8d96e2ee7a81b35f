import csv

import numpy as np
import pytest

from ntmplan.optimizer import (
    LOG_FIELDS,
    OptimizerConfig,
    OptimizerDivergence,
    objective_grad,
    objective_j,
    optimize,
)
from ntmplan.sdf import EnvironmentSdf, Sphere
from ntmplan.trajectory import Thresholds, conflict_matrix, env_collisions, propose_lines

THR = Thresholds()
# optimize against widened thresholds so the objective's minimum sits clear of them
OPT_THR = THR.inflated(0.02)
SPHERE_ENV = EnvironmentSdf((Sphere((0.0, 0.01, 0.0), 0.2),))


def test_pushes_line_out_of_sphere():
    # off-center: a line through the exact center is a symmetric stationary point
    b = propose_lines([[-0.8, 0.15, 0, 0.8, 0.15, 0]], 32)
    assert env_collisions(b, SPHERE_ENV, THR).all()
    best, log = optimize(b, SPHERE_ENV, OPT_THR)
    assert not env_collisions(best, SPHERE_ENV, THR).any()
    np.testing.assert_array_equal(best[:, [0, -1]], b[:, [0, -1]])
    np.testing.assert_array_equal(best[..., 0], b[..., 0])
    best_j = [row["best_J"] for row in log]
    assert all(x >= y for x, y in zip(best_j, best_j[1:]))
    assert len(log) <= 501


def test_separates_head_on_pair():
    b = propose_lines([[-0.5, 0, 0, 0.5, 0.01, 0], [0.5, 0, 0, -0.5, -0.01, 0]], 32)
    assert conflict_matrix(b, THR).any()
    best, _ = optimize(b, EnvironmentSdf(), OPT_THR)
    assert not conflict_matrix(best, THR).any()


def test_returns_best_iterate():
    b = propose_lines([[-0.8, 0, 0, 0.8, 0, 0]], 16)
    best, log = optimize(b, SPHERE_ENV, THR, OptimizerConfig(max_iters=50, stop_when_valid=False))
    cfg = OptimizerConfig()
    assert objective_j(best, SPHERE_ENV, THR, cfg) == pytest.approx(min(r["J"] for r in log))
    assert len(log) == 51


def test_valid_input_is_returned_unchanged():
    b = propose_lines([[-0.8, 0.6, 0, 0.8, 0.6, 0]], 16)
    best, log = optimize(b, SPHERE_ENV, THR)
    assert len(log) == 1
    assert best.tobytes() == b.tobytes()


def test_objective_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    b = propose_lines([[-0.5, 0.05, 0, 0.5, 0, 0.02], [0.5, -0.02, 0.01, -0.5, 0.03, 0]], 8)
    b[:, 1:-1, 1:] += rng.normal(0, 0.01, (2, 7, 3))
    cfg = OptimizerConfig()
    g = objective_grad(b, SPHERE_ENV, THR, cfg)
    assert not g[..., 0].any()
    h = 1e-7
    fd = np.zeros_like(g)
    for idx in np.ndindex(*b.shape):
        if idx[2] == 0:
            continue
        bp, bm = b.copy(), b.copy()
        bp[idx] += h
        bm[idx] -= h
        fd[idx] = (objective_j(bp, SPHERE_ENV, THR, cfg) - objective_j(bm, SPHERE_ENV, THR, cfg)) / (2 * h)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5


def test_non_finite_input_rejected():
    b = propose_lines([[-0.8, 0, 0, 0.8, 0, 0]], 8)
    b[0, 3, 1] = np.nan
    with pytest.raises(ValueError):
        optimize(b, SPHERE_ENV, THR)


def test_runaway_step_raises_divergence():
    b = propose_lines([[-0.8, 0, 0, 0.8, 0, 0]], 8)
    with pytest.raises(OptimizerDivergence):
        optimize(b, SPHERE_ENV, THR, OptimizerConfig(step_size=1e300, stop_when_valid=False, max_iters=20))


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        OptimizerConfig(step_size=0)
    with pytest.raises(ValueError):
        OptimizerConfig(weights=(1, 2))
    cfg = OptimizerConfig(weights=(1, 2, 3), max_iters=7)
    assert OptimizerConfig.from_dict(cfg.to_dict()) == cfg


def test_log_is_written(tmp_path):
    path = tmp_path / "opt.csv"
    b = propose_lines([[-0.8, 0, 0, 0.8, 0, 0]], 8)
    _, log = optimize(b, SPHERE_ENV, THR, OptimizerConfig(max_iters=5, log_path=str(path)))
    with open(path) as f:
        rows = list(csv.DictReader(f))
    assert tuple(rows[0]) == LOG_FIELDS
    assert len(rows) == len(log)
