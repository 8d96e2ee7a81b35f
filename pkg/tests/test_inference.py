import numpy as np
import pytest
import torch

from ntmplan.inference import deconflict, infer
from ntmplan.model import NtmConfig, build_model
from ntmplan.optimizer import OptimizerConfig, objective_j
from ntmplan.sdf import EnvironmentSdf, Sphere
from ntmplan.trajectory import Thresholds, propose_lines

ENV = EnvironmentSdf((Sphere((0.0, 0.0, 0.0), 0.2),))
THR = Thresholds()
QUERIES = np.array([[-0.8, 0.05, 0.0, 0.8, 0.05, 0.0], [0.0, -0.8, 0.5, 0.0, 0.8, 0.5]])


@pytest.fixture(scope="module")
def model():
    m = build_model(NtmConfig(width=16, layers=1, heads=2, ff_width=32, horizon=12, n_agents=2))
    with torch.no_grad():
        m.head.weight.normal_(0, 0.01, generator=torch.Generator().manual_seed(0))
    return m.eval()


def test_infer_shapes_and_endpoints(model):
    res = infer(model, QUERIES)
    assert res.bundle.shape == (2, 13, 4)
    assert res.bundle.dtype == np.float64
    np.testing.assert_allclose(res.bundle[:, 0, 1:], QUERIES[:, :3], atol=1e-7)
    np.testing.assert_allclose(res.bundle[:, -1, 1:], QUERIES[:, 3:], atol=1e-7)
    assert res.calc_time > 0 and res.refine_log == []


def test_infer_is_deterministic(model):
    a = infer(model, QUERIES).bundle
    b = infer(model, QUERIES).bundle
    assert a.tobytes() == b.tobytes()


def test_refinement_never_worse(model):
    raw = infer(model, QUERIES).bundle
    cfg = OptimizerConfig(max_iters=10, stop_when_valid=False)
    refined = infer(model, QUERIES, env=ENV, thresholds=THR, refine=cfg)
    assert len(refined.refine_log) == 11
    assert objective_j(refined.bundle, ENV, THR, cfg) <= objective_j(raw, ENV, THR, cfg)


def test_refinement_needs_environment(model):
    with pytest.raises(ValueError):
        infer(model, QUERIES, refine=OptimizerConfig(max_iters=2))


def test_occupied_query_warns(model):
    q = QUERIES.copy()
    q[0, :3] = 0.0
    with pytest.warns(UserWarning, match="inside an obstacle"):
        infer(model, q, env=ENV, thresholds=THR)


def test_deconflict_resamples_other_horizons(model):
    b = propose_lines(QUERIES, 30)
    res = deconflict(model, b, env=ENV, thresholds=THR)
    assert res.bundle.shape == (2, 13, 4)
    np.testing.assert_allclose(res.bundle[:, -1, 1:], QUERIES[:, 3:], atol=1e-7)


def test_deconflict_of_lines_equals_planning(model):
    b = propose_lines(QUERIES, 12)
    assert deconflict(model, b).bundle.tobytes() == infer(model, QUERIES).bundle.tobytes()
