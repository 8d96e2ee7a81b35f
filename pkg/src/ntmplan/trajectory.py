"""Trajectory bundles, training/optimization losses and conflict predicates.

A bundle is a float array of shape ``(N, T + 1, 4)`` holding ``(t, x, y, z)``
waypoints for ``N`` agents over horizon ``T``. Positions are in normalized
world units, timestamps in normalized time (``0`` at start, ``1`` at goal for
line proposals).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .sdf import EnvironmentSdf

# rows of the pairwise distance matrix processed at once
_PAIR_CHUNK = 1024


@dataclass(frozen=True)
class Thresholds:
    s_thresh: float = 0.02
    t_thresh: float = 0.1
    dist_thresh: float = 0.05

    def __post_init__(self):
        if min(self.s_thresh, self.t_thresh, self.dist_thresh) < 0:
            raise ValueError("thresholds must be non-negative")

    def inflated(self, margin: float) -> "Thresholds":
        """Safety margins widened by ``margin`` (time separation is left alone)."""
        return Thresholds(self.s_thresh + margin, self.t_thresh, self.dist_thresh + margin)

    def to_dict(self) -> dict:
        return asdict(self)


def validate_bundle(bundle) -> np.ndarray:
    b = np.asarray(bundle, dtype=np.float64)
    if b.ndim == 2:
        b = b[None]
    if b.ndim != 3 or b.shape[-1] != 4:
        raise ValueError(f"bundle must have shape (N, T+1, 4), got {b.shape}")
    if b.shape[0] < 1 or b.shape[1] < 2:
        raise ValueError("bundle needs at least one agent and two waypoints")
    if not np.all(np.isfinite(b)):
        raise ValueError("bundle contains non-finite values")
    if np.any(np.diff(b[..., 0], axis=1) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    return b


def horizon(bundle: np.ndarray) -> int:
    return bundle.shape[-2] - 1


def propose_line(start, goal, horizon: int, normalize_time: bool = True) -> np.ndarray:
    """Uniformly spaced straight-line trajectory ``(T + 1, 4)`` from start to goal."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    s = np.asarray(start, dtype=np.float64)
    g = np.asarray(goal, dtype=np.float64)
    j = np.arange(horizon + 1, dtype=np.float64)
    p = s + (g - s) * (j / horizon)[:, None]
    t = j / horizon if normalize_time else j
    return np.concatenate([t[:, None], p], axis=1)


def propose_lines(starts_goals, horizon: int) -> np.ndarray:
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    sg = np.asarray(starts_goals, dtype=np.float64).reshape(-1, 6)
    s, g = sg[:, None, :3], sg[:, None, 3:]
    u = np.arange(horizon + 1, dtype=np.float64) / horizon
    p = s + (g - s) * u[:, None]
    t = np.broadcast_to(u[None, :, None], (len(sg), horizon + 1, 1))
    return np.concatenate([t, p], axis=2)


def path_lengths(bundle: np.ndarray) -> np.ndarray:
    """Polyline length of every trajectory, shape ``(N,)``."""
    p = np.asarray(bundle)[..., 1:]
    return np.linalg.norm(np.diff(p, axis=-2), axis=-1).sum(axis=-1)


def loss_gt(pred, truth) -> float:
    """Mean L1 norm of the 4D waypoint difference."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.abs(pred - truth).sum(axis=-1).mean())


def loss_env(bundle, env: EnvironmentSdf, thresholds: Thresholds) -> float:
    return loss_env_grad(bundle, env, thresholds)[0]


def loss_env_grad(bundle, env: EnvironmentSdf, thresholds: Thresholds) -> tuple[float, np.ndarray]:
    """Mean safety hinge and its gradient wrt positions ``(N, T + 1, 3)``."""
    b = np.asarray(bundle, dtype=np.float64)
    d, g = env.distance_and_gradient(b[..., 1:])
    gap = thresholds.s_thresh - d
    active = gap > 0
    n = d.size
    value = float(np.where(active, gap, 0.0).sum() / n)
    grad = -g * active[..., None] / n
    return value, grad


def inter_hinge_terms(positions, times, agents, thresholds: Thresholds) -> np.ndarray:
    """Per-pair hinge matrix for flattened waypoints (no normalization).

    Entry ``(a, b)`` is ``max(0, dist_thresh - |p_a - p_b|)`` when ``a`` and
    ``b`` belong to different agents and are within ``t_thresh`` in time,
    otherwise zero.
    """
    p = np.asarray(positions, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    ag = np.asarray(agents)
    dist = np.linalg.norm(p[:, None] - p[None], axis=-1)
    gate = (np.abs(t[:, None] - t[None]) <= thresholds.t_thresh) & (ag[:, None] != ag[None])
    return np.where(gate, np.maximum(0.0, thresholds.dist_thresh - dist), 0.0)


def loss_inter(bundle, thresholds: Thresholds) -> float:
    return loss_inter_grad(bundle, thresholds)[0]


def loss_inter_grad(bundle, thresholds: Thresholds) -> tuple[float, np.ndarray]:
    """Time-gated pairwise separation hinge, summed over ordered agent pairs and divided by T*N."""
    b = np.asarray(bundle, dtype=np.float64)
    n_agents, n_pts = b.shape[0], b.shape[1]
    grad = np.zeros(b.shape[:-1] + (3,))
    if n_agents < 2:
        return 0.0, grad
    norm = (n_pts - 1) * n_agents
    flat = b.reshape(-1, 4)
    t, p = flat[:, 0], flat[:, 1:]
    agent = np.repeat(np.arange(n_agents), n_pts)
    a_idx, b_idx = _candidate_pairs(t, p, agent, thresholds)
    diff = p[a_idx] - p[b_idx]
    dist = np.linalg.norm(diff, axis=1)
    active = dist < thresholds.dist_thresh
    a_idx, b_idx, diff, dist = a_idx[active], b_idx[active], diff[active], dist[active]
    total = float(np.sum(thresholds.dist_thresh - dist))
    unit = np.divide(diff, dist[:, None], out=np.zeros_like(diff), where=dist[:, None] > 0)
    g = np.zeros_like(p)
    np.add.at(g, a_idx, -unit)
    np.add.at(g, b_idx, unit)
    return total / norm, (g / norm).reshape(grad.shape)


def _candidate_pairs(t, p, agent, thresholds: Thresholds):
    """Ordered index pairs that pass the time/agent gate and are roughly within range.

    A cheap Gram-matrix distance prefilters; exact distances are recomputed by
    the caller for the survivors.
    """
    sq = np.einsum("ij,ij->i", p, p)
    cutoff = thresholds.dist_thresh**2 + 1e-9
    rows, cols = [], []
    for lo in range(0, len(p), _PAIR_CHUNK):
        hi = min(lo + _PAIR_CHUNK, len(p))
        d2 = sq[lo:hi, None] + sq[None] - 2.0 * (p[lo:hi] @ p.T)
        cand = (d2 < cutoff) & (np.abs(t[lo:hi, None] - t[None]) <= thresholds.t_thresh)
        cand &= agent[lo:hi, None] != agent[None]
        r, c = np.nonzero(cand)
        rows.append(r + lo)
        cols.append(c)
    return np.concatenate(rows), np.concatenate(cols)


def loss_perf(bundle, reference_lengths=None) -> float:
    return loss_perf_grad(bundle, reference_lengths)[0]


def loss_perf_grad(bundle, reference_lengths=None) -> tuple[float, np.ndarray]:
    """Travel-distance loss.

    With reference lengths this is the mean hinge ``max(0, d - d_ref)``
    (penalizing paths longer than the reference); without, the mean length.
    """
    b = np.asarray(bundle, dtype=np.float64)
    p = b[..., 1:]
    seg = np.diff(p, axis=-2)
    seg_len = np.linalg.norm(seg, axis=-1)
    unit = np.divide(seg, seg_len[..., None], out=np.zeros_like(seg), where=seg_len[..., None] > 0)
    lengths = seg_len.sum(axis=-1)
    d_len = np.zeros_like(p)
    d_len[..., 1:, :] += unit
    d_len[..., :-1, :] -= unit
    n = b.shape[0]
    if reference_lengths is None:
        return float(lengths.mean()), d_len / n
    ref = np.asarray(reference_lengths, dtype=np.float64).reshape(-1)
    if ref.shape != (n,):
        raise ValueError("need one reference length per agent")
    excess = lengths - ref
    active = excess > 0
    return float(np.where(active, excess, 0.0).mean()), d_len * active[:, None, None] / n


def env_collision_free(traj, env: EnvironmentSdf, thresholds: Thresholds) -> bool:
    traj = np.asarray(traj, dtype=np.float64)
    return bool(np.all(env.distance(traj[..., 1:]) > thresholds.s_thresh))


def inter_conflict_free(a, b, thresholds: Thresholds) -> bool:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dt = np.abs(a[:, None, 0] - b[None, :, 0])
    dp = np.linalg.norm(a[:, None, 1:] - b[None, :, 1:], axis=-1)
    return bool(np.all((dt > thresholds.t_thresh) | (dp > thresholds.dist_thresh)))


def conflict_matrix(bundle, thresholds: Thresholds) -> np.ndarray:
    """``(N, N)`` boolean matrix, True where two distinct agents conflict."""
    b = np.asarray(bundle, dtype=np.float64)
    n = b.shape[0]
    out = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for k in range(i + 1, n):
            out[i, k] = out[k, i] = not inter_conflict_free(b[i], b[k], thresholds)
    return out


def env_collisions(bundle, env: EnvironmentSdf, thresholds: Thresholds) -> np.ndarray:
    """Per-agent boolean: True where the trajectory has an environmental collision."""
    b = np.asarray(bundle, dtype=np.float64)
    return np.any(env.distance(b[..., 1:]) <= thresholds.s_thresh, axis=-1)


def bundle_valid(bundle, env: EnvironmentSdf, thresholds: Thresholds) -> bool:
    return not env_collisions(bundle, env, thresholds).any() and not conflict_matrix(
        bundle, thresholds
    ).any()


def resample_trajectory(points, horizon: int) -> np.ndarray:
    """Arc-length resampling of a 3D polyline to ``horizon + 1`` equally spaced waypoints.

    Timestamps are uniform in [0, 1]. The first and last points are kept exactly.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 1:
        pts = np.concatenate([pts, pts])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    t = np.arange(horizon + 1) / horizon
    if s[-1] <= 0:
        out = np.repeat(pts[:1], horizon + 1, axis=0)
    else:
        keep = np.concatenate([[True], seg > 0])
        s_k, pts_k = s[keep], pts[keep]
        target = t * s[-1]
        out = np.stack([np.interp(target, s_k, pts_k[:, k]) for k in range(3)], axis=1)
    out[0], out[-1] = pts[0], pts[-1]
    return np.concatenate([t[:, None], out], axis=1)


def resample_bundle(bundle, horizon: int) -> np.ndarray:
    b = np.asarray(bundle, dtype=np.float64)
    return np.stack([resample_trajectory(tr[:, 1:], horizon) for tr in b])


def induce_conflicts(bundle, rng: np.random.Generator) -> np.ndarray:
    """Pull agents together in random pairs so every pair meets at one waypoint.

    Agent ``b`` of each pair is blended toward agent ``a`` with a Gaussian bump
    in waypoint index whose peak weight is exactly 1, so the two coincide at
    equal timestamps. Endpoints are untouched.
    """
    out = np.array(bundle, dtype=np.float64, copy=True)
    n, length = out.shape[0], out.shape[1]
    if n < 2 or length < 3:
        return out
    perm = rng.permutation(n)
    pairs = [(perm[i], perm[i + 1]) for i in range(0, n - 1, 2)]
    if n % 2:
        pairs.append((perm[0], perm[-1]))
    j = np.arange(length)
    for a, b in pairs:
        center = rng.integers(max(1, length // 4), max(2, (3 * length) // 4))
        width = rng.uniform(0.1, 0.25) * (length - 1)
        phi = np.exp(-(((j - center) / width) ** 2))
        phi[0] = phi[-1] = 0.0
        phi[center] = 1.0
        out[b, :, 1:] += phi[:, None] * (out[a, :, 1:] - out[b, :, 1:])
    return out


# --- JSONL bundle files -------------------------------------------------------


@dataclass
class PlanningInstance:
    starts_goals: np.ndarray  # (N, 6)
    trajectories: np.ndarray | None = None  # (N, T + 1, 4)

    def to_json(self) -> dict:
        rec = {"starts_goals": self.starts_goals.tolist()}
        if self.trajectories is not None:
            rec["trajectories"] = self.trajectories.tolist()
        return rec

    @classmethod
    def from_json(cls, rec: dict) -> "PlanningInstance":
        sg = np.asarray(rec["starts_goals"], dtype=np.float64).reshape(-1, 6)
        tr = rec.get("trajectories")
        return cls(sg, None if tr is None else np.asarray(tr, dtype=np.float64))

    @classmethod
    def from_bundle(cls, bundle: np.ndarray) -> "PlanningInstance":
        sg = np.concatenate([bundle[:, 0, 1:], bundle[:, -1, 1:]], axis=1)
        return cls(sg, bundle)


def dumps_instance(inst: PlanningInstance) -> str:
    return json.dumps(inst.to_json(), separators=(",", ":"))


def write_jsonl(instances: Iterable[PlanningInstance], path: str | Path) -> None:
    with open(path, "w") as f:
        for inst in instances:
            f.write(dumps_instance(inst) + "\n")


def iter_jsonl(path: str | Path) -> Iterator[PlanningInstance]:
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                yield PlanningInstance.from_json(json.loads(line))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed instance ({exc})") from exc


def read_jsonl(path: str | Path) -> list[PlanningInstance]:
    return list(iter_jsonl(path))
