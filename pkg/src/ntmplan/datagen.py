"""Ground-truth dataset generation: sample start/goal sets, seed with A*, refine, validate."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .astar import astar_plan, path_to_trajectory
from .optimizer import OptimizerConfig, optimize
from .sdf import EnvironmentSdf, EnvironmentTooDense, OccupancyGrid, rasterize, sample_free_points
from .trajectory import (
    PlanningInstance,
    Thresholds,
    bundle_valid,
    read_jsonl,
    write_jsonl,
)

log = logging.getLogger(__name__)

DATAGEN_OPTIMIZER = OptimizerConfig(max_iters=300, stop_when_valid=False)


class InfeasibleDataset(RuntimeError):
    pass


@dataclass(frozen=True)
class DatagenConfig:
    n_instances: int = 100
    n_agents: int = 8
    horizon: int = 32
    thresholds: Thresholds = Thresholds()
    optimizer: OptimizerConfig = DATAGEN_OPTIMIZER
    seed: int = 0
    # extra clearance the optimizer aims for beyond the validation thresholds
    opt_margin: float = 0.02
    endpoint_margin: float = 0.06
    min_separation: float = 0.15
    grid_resolution: int = 32
    acceptance_floor: float = 0.05
    time_budget: float | None = None
    workers: int = 1

    def __post_init__(self):
        if min(self.n_instances, self.n_agents, self.horizon) < 1:
            raise ValueError("n_instances, n_agents and horizon must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"] = self.optimizer.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatagenConfig":
        d = dict(d)
        if "thresholds" in d:
            d["thresholds"] = Thresholds(**d["thresholds"])
        if "optimizer" in d:
            d["optimizer"] = OptimizerConfig.from_dict(d["optimizer"])
        return cls(**d)


@dataclass
class Dataset:
    instances: list[PlanningInstance]
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.instances)

    def bundles(self) -> np.ndarray:
        return np.stack([inst.trajectories for inst in self.instances])

    def starts_goals(self) -> np.ndarray:
        return np.stack([inst.starts_goals for inst in self.instances])


def _sample_separated(env, n, margin, min_sep, rng) -> np.ndarray:
    chosen: list[np.ndarray] = []
    for _ in range(50):
        for p in sample_free_points(env, 4 * n, margin, rng):
            if all(np.linalg.norm(p - q) >= min_sep for q in chosen):
                chosen.append(p)
                if len(chosen) == n:
                    return np.stack(chosen)
    raise EnvironmentTooDense(f"could not place {n} points {min_sep} apart")


def _attempt(env: EnvironmentSdf, grid: OccupancyGrid, cfg: DatagenConfig, k: int):
    rng = np.random.default_rng([cfg.seed, k])
    starts = _sample_separated(env, cfg.n_agents, cfg.endpoint_margin, cfg.min_separation, rng)
    goals = _sample_separated(env, cfg.n_agents, cfg.endpoint_margin, cfg.min_separation, rng)
    trajs = []
    for s, g in zip(starts, goals):
        path = astar_plan(grid, s, g)
        if path is None:
            return "unsolvable", None
        trajs.append(path_to_trajectory(path, s, g, cfg.horizon))
    proposal = np.stack(trajs)
    refined, _ = optimize(proposal, env, cfg.thresholds.inflated(cfg.opt_margin), cfg.optimizer)
    if not bundle_valid(refined, env, cfg.thresholds):
        return "invalid", None
    return "ok", PlanningInstance(np.concatenate([starts, goals], axis=1), refined)


def _attempt_star(args):
    return _attempt(*args)


def generate_dataset(env: EnvironmentSdf, config: DatagenConfig) -> Dataset:
    """Produce ``config.n_instances`` validated instances (fewer only on time-out).

    Attempt ``k`` draws from a generator seeded by ``(seed, k)`` and instances
    are kept in attempt order, so the output does not depend on ``workers``.
    """
    t0 = time.perf_counter()
    inflate = config.thresholds.s_thresh + config.opt_margin
    cell = float(np.max((env.hi - env.lo) / config.grid_resolution))
    grid = rasterize(env, config.grid_resolution, inflate + cell * np.sqrt(3) / 2)
    max_attempts = int(np.ceil(config.n_instances / config.acceptance_floor))
    counts = {"attempts": 0, "ok": 0, "unsolvable": 0, "invalid": 0}
    kept: list[PlanningInstance] = []
    timed_out = False
    chunk = max(1, config.workers) * 4

    pool = ProcessPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        k = 0
        while len(kept) < config.n_instances:
            if k >= max_attempts:
                raise InfeasibleDataset(
                    f"acceptance rate below {config.acceptance_floor:.0%}: {counts}"
                    " (environment/thresholds infeasible)"
                )
            if config.time_budget is not None and time.perf_counter() - t0 > config.time_budget:
                timed_out = True
                break
            ks = range(k, min(k + chunk, max_attempts))
            jobs = [(env, grid, config, i) for i in ks]
            results = pool.map(_attempt_star, jobs) if pool else map(_attempt_star, jobs)
            for status, inst in results:
                # surplus attempts of the last chunk are ignored so counts do not depend on workers
                if len(kept) == config.n_instances:
                    break
                counts["attempts"] += 1
                counts[status] += 1
                if status == "ok":
                    kept.append(inst)
            k = ks.stop
            # early bail-out once the acceptance rate is clearly hopeless
            if counts["attempts"] >= 50 and counts["ok"] / counts["attempts"] < config.acceptance_floor:
                raise InfeasibleDataset(
                    f"acceptance rate below {config.acceptance_floor:.0%}: {counts}"
                    " (environment/thresholds infeasible)"
                )
    finally:
        if pool:
            pool.shutdown()
    log.info("generated %d instances in %.1fs: %s", len(kept), time.perf_counter() - t0, counts)
    manifest = {
        "env_hash": env.content_hash(),
        "config": config.to_dict(),
        "seed": config.seed,
        "counts": {"instances": len(kept), **counts},
        "timed_out": timed_out,
    }
    return Dataset(kept, manifest)


def split_dataset(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Deterministic disjoint train/val/test split; rounding remainder goes to train."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    n = len(dataset)
    n_val = int(np.floor(n * fr[1] + 1e-9))
    n_test = int(np.floor(n * fr[2] + 1e-9))
    perm = np.random.default_rng(seed).permutation(n)
    parts = (perm[n_val + n_test :], perm[:n_val], perm[n_val : n_val + n_test])
    out = []
    for name, idx in zip(("train", "val", "test"), parts):
        idx = np.sort(idx)
        man = dict(dataset.manifest, split=name, split_seed=seed, indices=idx.tolist())
        out.append(Dataset([dataset.instances[i] for i in idx], man))
    return tuple(out)


def manifest_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".manifest.json")


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    write_jsonl(dataset.instances, path)
    manifest_path(path).write_text(json.dumps(dataset.manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    instances = read_jsonl(path)
    mp = manifest_path(path)
    manifest = json.loads(mp.read_text()) if mp.exists() else {}
    return Dataset(instances, manifest)


def revalidate(dataset: Dataset, env: EnvironmentSdf, thresholds: Thresholds) -> list[int]:
    """Indices of instances that fail any dataset invariant."""
    bad = []
    horizons = {inst.trajectories.shape[1] for inst in dataset.instances if inst.trajectories is not None}
    for idx, inst in enumerate(dataset.instances):
        sg = inst.starts_goals
        ok = np.all(env.distance(sg[:, :3]) > 0) and np.all(env.distance(sg[:, 3:]) > 0)
        tr = inst.trajectories
        ok = ok and tr is not None and len(horizons) == 1 and bundle_valid(tr, env, thresholds)
        if not ok:
            bad.append(idx)
    return bad
