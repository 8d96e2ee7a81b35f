"""Fixed-step gradient descent on waypoint positions.

The objective is ``w_env * loss_env + w_inter * loss_inter + w_dist * mean_length``.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .sdf import EnvironmentSdf
from .trajectory import (
    Thresholds,
    bundle_valid,
    loss_env_grad,
    loss_inter_grad,
    loss_perf_grad,
)

LOG_FIELDS = ("iteration", "J", "loss_env", "loss_inter", "loss_perf", "best_J")


class OptimizerDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    weights: tuple[float, float, float] = (10.0, 10.0, 1.0)
    step_size: float = 1e-2
    max_iters: int = 500
    tol: float = 0.0
    pin_endpoints: bool = True
    freeze_time: bool = True
    stop_when_valid: bool = True
    time_budget: float | None = None
    log_path: str | None = None

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if len(self.weights) != 3 or min(self.weights) < 0:
            raise ValueError("weights must be three non-negative numbers")
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    def with_steps(self, steps: int) -> "OptimizerConfig":
        return replace(self, max_iters=steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = tuple(d["weights"])
        return cls(**d)


def objective_terms(bundle, env: EnvironmentSdf, thresholds: Thresholds, config: OptimizerConfig):
    """Objective value, its three components and the gradient wrt positions."""
    w_env, w_inter, w_dist = config.weights
    e, ge = loss_env_grad(bundle, env, thresholds)
    i, gi = loss_inter_grad(bundle, thresholds)
    d, gd = loss_perf_grad(bundle)
    j = w_env * e + w_inter * i + w_dist * d
    return j, (e, i, d), w_env * ge + w_inter * gi + w_dist * gd


def objective_j(bundle, env: EnvironmentSdf, thresholds: Thresholds, config: OptimizerConfig) -> float:
    return float(objective_terms(bundle, env, thresholds, config)[0])


def objective_grad(bundle, env, thresholds, config) -> np.ndarray:
    """Gradient of the objective wrt the full 4D bundle.

    The time channel is identically zero: the only time dependence is the
    piecewise-constant gate of the separation term.
    """
    g = np.zeros(np.shape(bundle))
    g[..., 1:] = objective_terms(bundle, env, thresholds, config)[2]
    return g


def optimize(
    bundle,
    env: EnvironmentSdf,
    thresholds: Thresholds,
    config: OptimizerConfig = OptimizerConfig(),
) -> tuple[np.ndarray, list[dict]]:
    """Run gradient descent and return the best-objective iterate with its log.

    Stops when the objective drops to ``config.tol``, when the bundle passes
    both collision predicates (if ``stop_when_valid``), after ``max_iters``
    updates, or when ``time_budget`` seconds have elapsed.
    """
    w = np.array(bundle, dtype=np.float64, copy=True)
    t0 = time.perf_counter()
    best = w.copy()
    best_j = np.inf
    log: list[dict] = []
    for it in range(config.max_iters + 1):
        j, (e, i, d), grad = objective_terms(w, env, thresholds, config)
        if not np.isfinite(j) or not np.all(np.isfinite(grad)):
            raise OptimizerDivergence(f"non-finite objective/gradient at iteration {it} (J={j})")
        if j < best_j:
            best_j, best = j, w.copy()
        log.append(dict(zip(LOG_FIELDS, (it, j, e, i, d, best_j))))
        if it == config.max_iters or j <= config.tol:
            break
        if config.stop_when_valid and bundle_valid(w, env, thresholds):
            break
        if config.time_budget is not None and time.perf_counter() - t0 > config.time_budget:
            break
        if config.pin_endpoints:
            grad[:, 0] = 0.0
            grad[:, -1] = 0.0
        # positions only: the time gradient is zero (see objective_grad)
        w[..., 1:] -= config.step_size * grad
    if config.log_path:
        write_log(log, config.log_path)
    return best, log


def write_log(log: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_FIELDS)
        writer.writeheader()
        writer.writerows(log)
