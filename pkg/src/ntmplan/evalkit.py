"""Collision/conflict metrics and the experiment protocols built on them."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datagen import load_dataset
from .inference import deconflict, infer
from .model import load_params
from .optimizer import OptimizerConfig
from .sdf import EnvironmentSdf, load_environment, sample_free_points
from .trajectory import (
    Thresholds,
    conflict_matrix,
    env_collisions,
    induce_conflicts,
    path_lengths,
)

PROTOCOLS = ("plan", "deconflict", "ablation", "scaling")


class ArtifactMismatch(ValueError):
    pass


def _bundles(bundles) -> list[np.ndarray]:
    if isinstance(bundles, np.ndarray) and bundles.ndim == 3:
        return [bundles]
    return [np.asarray(b, dtype=np.float64) for b in bundles]


def compute_ecr(bundles, env: EnvironmentSdf, thresholds: Thresholds, unsolved_count: int = 0) -> float:
    """Share of trajectories with an environmental collision; unsolved queries count as collisions."""
    bs = _bundles(bundles)
    colliding = sum(int(env_collisions(b, env, thresholds).sum()) for b in bs)
    total = sum(b.shape[0] for b in bs)
    denom = total + unsolved_count
    return (colliding + unsolved_count) / denom if denom else 0.0


def compute_icr(bundles, thresholds: Thresholds) -> float:
    """Share of trajectories that conflict with at least one other trajectory of their bundle."""
    bs = _bundles(bundles)
    involved = sum(int(conflict_matrix(b, thresholds).any(axis=1).sum()) for b in bs)
    total = sum(b.shape[0] for b in bs)
    return involved / total if total else 0.0


def compute_td(bundles) -> float:
    """Mean polyline length, summed with ``math.fsum`` so the result is independent of summation order."""
    bs = _bundles(bundles)
    lengths = []
    for b in bs:
        seg = np.sqrt((np.diff(b[..., 1:], axis=1) ** 2).sum(axis=-1))
        lengths += [math.fsum(row) for row in seg.tolist()]
    return math.fsum(lengths) / len(lengths) if lengths else 0.0


@dataclass
class EvalReport:
    name: str
    ecr: float
    icr: float
    td: float
    ct_mean: float = 0.0
    ct_std: float = 0.0
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(name, bundles, env, thresholds, times: Sequence[float] = (), unsolved: int = 0) -> EvalReport:
    bs = _bundles(bundles)
    t = np.asarray(times, dtype=np.float64)
    return EvalReport(
        name=name,
        ecr=compute_ecr(bs, env, thresholds, unsolved),
        icr=compute_icr(bs, thresholds),
        td=compute_td(bs),
        ct_mean=float(t.mean()) if len(t) else 0.0,
        ct_std=float(t.std()) if len(t) else 0.0,
        counts={"instances": len(bs), "trajectories": int(sum(b.shape[0] for b in bs)), "unsolved": unsolved},
    )


def per_instance_rows(name, bundles, env, thresholds, times=None) -> list[dict]:
    rows = []
    for i, b in enumerate(_bundles(bundles)):
        rows.append(
            {
                "condition": name,
                "instance": i,
                "env_collisions": int(env_collisions(b, env, thresholds).sum()),
                "conflicting": int(conflict_matrix(b, thresholds).any(axis=1).sum()),
                "td": float(path_lengths(b).mean()),
                "ct": float(times[i]) if times is not None else "",
            }
        )
    return rows


@dataclass(frozen=True)
class ExperimentConfig:
    thresholds: Thresholds = Thresholds()
    refine: OptimizerConfig = OptimizerConfig(stop_when_valid=False)
    # clearance the refinement optimizer aims for beyond the evaluation thresholds
    refine_margin: float = 0.01
    ablation_steps: tuple[int, ...] = (0, 5, 10)
    deconflict_refine_steps: int = 10
    scaling_agents: tuple[int, ...] = (1, 8, 64)
    scaling_repeats: int = 20
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["refine"] = self.refine.to_dict()
        d["ablation_steps"] = list(self.ablation_steps)
        d["scaling_agents"] = list(self.scaling_agents)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "thresholds" in d:
            d["thresholds"] = Thresholds(**d["thresholds"])
        if "refine" in d:
            d["refine"] = OptimizerConfig.from_dict(d["refine"])
        for k in ("ablation_steps", "scaling_agents"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def refine_config(self, steps: int) -> OptimizerConfig | None:
        return self.refine.with_steps(steps) if steps > 0 else None


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def plan_bundles(model, starts_goals, env, thresholds, refine: OptimizerConfig | None):
    bundles, times = [], []
    for sg in starts_goals:
        res = infer(model, sg, env=env, thresholds=thresholds, refine=refine)
        bundles.append(res.bundle)
        times.append(res.calc_time)
    return bundles, times


def perturb_until(bundles: Sequence[np.ndarray], thresholds: Thresholds, target_icr: float, seed: int):
    """Induce conflicts in every bundle, re-drawing until the set's ICR reaches ``target_icr``."""
    for attempt in range(20):
        out = [induce_conflicts(b, np.random.default_rng([seed, attempt, i])) for i, b in enumerate(bundles)]
        if compute_icr(out, thresholds) >= target_icr:
            return out
    raise RuntimeError(f"could not reach ICR {target_icr} by perturbation")


@dataclass
class Condition:
    report: EvalReport
    bundles: list[np.ndarray]
    times: list[float] | None = None


def _condition(name, bundles, env, thr, times=None) -> Condition:
    return Condition(evaluate(name, bundles, env, thr, times or ()), bundles, times)


def run_protocol(protocol: str, model, instances, env: EnvironmentSdf, config: ExperimentConfig) -> list[Condition]:
    """Evaluate ``model`` on ``instances`` (PlanningInstance list) in normalized units."""
    thr = config.thresholds
    opt_thr = thr.inflated(config.refine_margin)
    torch.set_num_threads(1)
    if protocol == "plan":
        sgs = [inst.starts_goals for inst in instances]
        bundles, times = plan_bundles(model, sgs, env, opt_thr, None)
        out = [_condition("model", bundles, env, thr, times)]
        truth = [inst.trajectories for inst in instances if inst.trajectories is not None]
        if truth:
            out.append(_condition("ground_truth", truth, env, thr))
        return out
    if protocol == "ablation":
        sgs = [inst.starts_goals for inst in instances]
        out = []
        for steps in config.ablation_steps:
            bundles, times = plan_bundles(model, sgs, env, opt_thr, config.refine_config(steps))
            out.append(_condition(f"refine_{steps}", bundles, env, thr, times))
        return out
    if protocol == "deconflict":
        truth = [inst.trajectories for inst in instances]
        before = perturb_until(truth, thr, 0.8, config.seed)
        refine = config.refine_config(config.deconflict_refine_steps)
        after, times = [], []
        for b in before:
            res = deconflict(model, b, env=env, thresholds=opt_thr, refine=refine)
            after.append(res.bundle)
            times.append(res.calc_time)
        return [_condition("before", before, env, thr), _condition("after", after, env, thr, times)]
    if protocol == "scaling":
        out = []
        for n in config.scaling_agents:
            rng = np.random.default_rng([config.seed, n])
            pts = sample_free_points(env, 2 * n * (config.scaling_repeats + 1), 0.06, rng)
            sgs = pts.reshape(config.scaling_repeats + 1, n, 6)
            bundles, times = plan_bundles(model, sgs, env, opt_thr, None)
            # the first call warms up allocator and kernels
            out.append(_condition(f"N={n}", bundles[1:], env, thr, times[1:]))
        return out
    raise ValueError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")


def run_experiment(
    protocol: str,
    model_path: str | Path,
    dataset_path: str | Path | None,
    env_path: str | Path,
    config: ExperimentConfig = ExperimentConfig(),
    out_path: str | Path | None = None,
    csv_path: str | Path | None = None,
) -> dict:
    """Load and cross-check artifacts, run one protocol and return (and optionally write) the report."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    paths = [model_path, env_path] + ([dataset_path] if dataset_path else [])
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(p)
    env = load_environment(env_path).normalized()
    env_hash = env.content_hash()
    model, _, _ = load_params(model_path, expected_env_hash=env_hash)
    instances = []
    dataset_hash = None
    if protocol != "scaling":
        if dataset_path is None:
            raise ValueError(f"protocol {protocol!r} needs a dataset")
        ds = load_dataset(dataset_path)
        if ds.manifest.get("env_hash") not in (None, env_hash):
            raise ArtifactMismatch("dataset was generated for a different environment")
        instances = ds.instances
        dataset_hash = file_hash(dataset_path)
    conditions = run_protocol(protocol, model, instances, env, config)
    report = {
        "protocol": protocol,
        "env_hash": env_hash,
        "model_hash": file_hash(model_path),
        "dataset_hash": dataset_hash,
        "thresholds": config.thresholds.to_dict(),
        "config": config.to_dict(),
        "conditions": [c.report.to_dict() for c in conditions],
    }
    if out_path:
        Path(out_path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if csv_path:
        rows = []
        for c in conditions:
            rows += per_instance_rows(c.report.name, c.bundles, env, config.thresholds, c.times)
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else ["condition"])
            writer.writeheader()
            writer.writerows(rows)
    return report


def load_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def strip_timing(report: dict) -> dict:
    """Copy of a report without wall-clock fields, for reproducibility comparisons."""
    r = json.loads(json.dumps(report))
    for c in r.get("conditions", []):
        c.pop("ct_mean", None)
        c.pop("ct_std", None)
    return r
