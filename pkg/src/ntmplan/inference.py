"""Query-time use of a trained model: planning from start/goal pairs and de-confliction."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import NeuralTrajectoryModel
from .optimizer import OptimizerConfig, optimize
from .sdf import EnvironmentSdf
from .trajectory import Thresholds, propose_lines, resample_bundle


@dataclass
class InferenceResult:
    bundle: np.ndarray
    calc_time: float
    refine_log: list[dict] = field(default_factory=list)


def run_model(model: NeuralTrajectoryModel, proposal: np.ndarray) -> np.ndarray:
    with torch.inference_mode():
        out = model(torch.from_numpy(np.ascontiguousarray(proposal, dtype=np.float32)))
    return out.numpy().astype(np.float64)


def _refine(bundle, env, thresholds, refine):
    if refine is None:
        return bundle, []
    if env is None or thresholds is None:
        raise ValueError("refinement needs an environment and thresholds")
    return optimize(bundle, env, thresholds, refine)


def infer(
    model: NeuralTrajectoryModel,
    queries,
    env: EnvironmentSdf | None = None,
    thresholds: Thresholds | None = None,
    refine: OptimizerConfig | None = None,
) -> InferenceResult:
    """Plan trajectories for ``(N, 6)`` start/goal rows: line proposal, model, optional refinement."""
    sg = np.asarray(queries, dtype=np.float64).reshape(-1, 6)
    if env is not None:
        bad = (env.distance(sg[:, :3]) <= 0) | (env.distance(sg[:, 3:]) <= 0)
        if bad.any():
            warnings.warn(f"{int(bad.sum())} queries start or end inside an obstacle", stacklevel=2)
    t0 = time.perf_counter()
    proposal = propose_lines(sg, model.config.horizon)
    bundle = run_model(model, proposal)
    bundle, rlog = _refine(bundle, env, thresholds, refine)
    return InferenceResult(bundle, time.perf_counter() - t0, rlog)


def deconflict(
    model: NeuralTrajectoryModel,
    bundle,
    env: EnvironmentSdf | None = None,
    thresholds: Thresholds | None = None,
    refine: OptimizerConfig | None = None,
) -> InferenceResult:
    """Same as :func:`infer` but the given (possibly conflicting) bundle is the proposal."""
    b = np.asarray(bundle, dtype=np.float64)
    if b.shape[1] != model.config.horizon + 1:
        b = resample_bundle(b, model.config.horizon)
    t0 = time.perf_counter()
    out = run_model(model, b)
    out, rlog = _refine(out, env, thresholds, refine)
    return InferenceResult(out, time.perf_counter() - t0, rlog)
