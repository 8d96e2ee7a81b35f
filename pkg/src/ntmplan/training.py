"""Differentiable losses and the supervised training loop for the trajectory model."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .model import NeuralTrajectoryModel, NtmConfig, build_model
from .sdf import EnvironmentSdf
from .trajectory import Thresholds, induce_conflicts, path_lengths, propose_lines

log = logging.getLogger(__name__)

TRAIN_LOG_FIELDS = ("epoch", "l_gt", "l_sdist", "l_inter", "l_dist", "total")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, last_good: dict):
        super().__init__(msg)
        self.last_good = last_good


class _SdfFunction(torch.autograd.Function):
    """Signed distance of a point tensor with the analytic gradient as backward."""

    @staticmethod
    def forward(ctx, points: torch.Tensor, env: EnvironmentSdf):
        pts = points.detach().cpu().double().numpy()
        d, g = env.distance_and_gradient(pts)
        ctx.save_for_backward(torch.from_numpy(g).to(points.dtype))
        return torch.from_numpy(d).to(points.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (g,) = ctx.saved_tensors
        return grad_out[..., None] * g, None


def sdf_torch(env: EnvironmentSdf, points: torch.Tensor) -> torch.Tensor:
    return _SdfFunction.apply(points, env)


def _safe_norm(v: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(torch.clamp((v * v).sum(-1), min=1e-20))


def loss_gt_torch(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    return (pred - truth).abs().sum(-1).mean()


def loss_env_torch(pred: torch.Tensor, env: EnvironmentSdf, thresholds: Thresholds) -> torch.Tensor:
    return torch.relu(thresholds.s_thresh - sdf_torch(env, pred[..., 1:])).mean()


def loss_inter_torch(pred: torch.Tensor, thresholds: Thresholds) -> torch.Tensor:
    """Batched separation hinge for ``(B, N, L, 4)``, averaged over the batch."""
    if pred.dim() == 3:
        pred = pred[None]
    b, n, l, _ = pred.shape
    if n < 2:
        return pred.sum() * 0.0
    flat = pred.reshape(b, n * l, 4)
    t, p = flat[..., 0].detach(), flat[..., 1:]
    agent = torch.arange(n).repeat_interleave(l)
    gate = (t[:, :, None] - t[:, None, :]).abs() <= thresholds.t_thresh
    gate &= (agent[:, None] != agent[None, :])[None]
    dist = _safe_norm(p[:, :, None, :] - p[:, None, :, :])
    hinge = torch.relu(thresholds.dist_thresh - dist) * gate
    return hinge.sum(dim=(1, 2)).mean() / ((l - 1) * n)


def loss_perf_torch(pred: torch.Tensor, reference_lengths: torch.Tensor | None = None) -> torch.Tensor:
    lengths = _safe_norm(pred[..., 1:, 1:] - pred[..., :-1, 1:]).sum(-1)
    if reference_lengths is None:
        return lengths.mean()
    return torch.relu(lengths - reference_lengths).mean()


def training_objective(pred, truth, ref_lengths, env, thresholds, weights):
    """Weighted sum of the four losses; returns (total, components)."""
    parts = (
        loss_gt_torch(pred, truth),
        loss_env_torch(pred, env, thresholds),
        loss_inter_torch(pred, thresholds),
        loss_perf_torch(pred, ref_lengths),
    )
    total = sum(w * x for w, x in zip(weights, parts))
    return total, parts


@dataclass
class TrainingData:
    truth: np.ndarray  # (M, N, T + 1, 4)
    lines: np.ndarray  # (M, N, T + 1, 4)
    ref_lengths: np.ndarray  # (M, N)

    @classmethod
    def from_bundles(cls, bundles: np.ndarray) -> "TrainingData":
        bundles = np.asarray(bundles, dtype=np.float64)
        horizon = bundles.shape[2] - 1
        sg = np.concatenate([bundles[:, :, 0, 1:], bundles[:, :, -1, 1:]], axis=-1)
        lines = np.stack([propose_lines(x, horizon) for x in sg])
        return cls(bundles, lines, path_lengths(bundles))


def _sub_path(points: np.ndarray, u0: float, u1: float, n: int) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] <= 0:
        return np.repeat(points[:1], n, axis=0)
    target = np.linspace(u0, u1, n) * s[-1]
    return np.stack([np.interp(target, s, points[:, k]) for k in range(3)], axis=1)


def augment_truth(truth: np.ndarray, rng: np.random.Generator, min_fraction: float = 0.5) -> np.ndarray:
    """Random reversals, arc-length sub-paths and cross-instance agent mixing of a truth batch.

    Every sample lies on a ground-truth polyline. Sub-path waypoints fall
    between the validated ones, so clearance is kept only approximately when
    the horizon is coarse.
    """
    b, n, l, _ = truth.shape
    flat = truth.reshape(b * n, l, 4)[rng.permutation(b * n)]
    out = flat.copy()
    for r in range(len(out)):
        pts = flat[r, :, 1:]
        if rng.random() < 0.5:
            pts = pts[::-1]
        if rng.random() < 0.5:
            span = rng.uniform(min_fraction, 1.0)
            u0 = rng.uniform(0.0, 1.0 - span)
            pts = _sub_path(pts, u0, u0 + span, l)
        out[r, :, 1:] = pts
    return out.reshape(b, n, l, 4)


def _batch(data: TrainingData, idx: np.ndarray, config: NtmConfig, rng: np.random.Generator):
    """Proposals, targets and reference lengths for one minibatch."""
    truth = data.truth[idx]
    if config.augment:
        truth = augment_truth(truth, rng)
        sg = np.concatenate([truth[:, :, 0, 1:], truth[:, :, -1, 1:]], axis=-1)
        props = np.stack([propose_lines(x, config.horizon) for x in sg])
    else:
        props = data.lines[idx].copy()
    if config.deconflict_fraction > 0:
        pick = rng.random(len(idx)) < config.deconflict_fraction
        for row in np.nonzero(pick)[0]:
            props[row] = induce_conflicts(truth[row], rng)
    to_t = lambda a: torch.from_numpy(np.ascontiguousarray(a)).float()  # noqa: E731
    return to_t(props), to_t(truth), to_t(path_lengths(truth))


def train(
    bundles,
    env: EnvironmentSdf,
    thresholds: Thresholds,
    config: NtmConfig,
    log_path: str | Path | None = None,
    model: NeuralTrajectoryModel | None = None,
) -> tuple[NeuralTrajectoryModel, list[dict]]:
    """Fit the model to ground-truth bundles ``(M, N, T + 1, 4)`` with Adam.

    Proposals are straight lines between each agent's endpoints. With
    ``config.augment`` the targets are randomly re-cut ground-truth paths (see
    :func:`augment_truth`); with ``config.deconflict_fraction > 0`` that share
    of samples instead uses the target with artificially induced conflicts as
    the proposal.
    """
    data = TrainingData.from_bundles(bundles)
    m, n, l, _ = data.truth.shape
    if m == 0:
        raise ValueError("empty training set")
    if l != config.horizon + 1 or n != config.n_agents:
        raise ValueError(f"dataset shape (N={n}, T={l - 1}) does not match config (N={config.n_agents}, T={config.horizon})")
    if model is None:
        model = build_model(config)
    torch.manual_seed(config.seed)
    loss_thr = thresholds.inflated(config.train_margin)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng([config.seed, 1])
    history: list[dict] = []
    last_good = copy.deepcopy(model.state_dict())
    model.train()
    for epoch in range(config.epochs):
        order = rng.permutation(m)
        sums = np.zeros(5)
        for lo in range(0, m, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            prop, truth, ref = _batch(data, idx, config, rng)
            pred = model(prop)
            total, parts = training_objective(pred, truth, ref, env, loss_thr, config.loss_weights)
            if not torch.isfinite(total):
                model.load_state_dict(last_good)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_good)
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += len(idx) * np.array([p.item() for p in parts] + [total.item()])
        row = dict(zip(TRAIN_LOG_FIELDS, [epoch, *(sums / m)]))
        history.append(row)
        last_good = copy.deepcopy(model.state_dict())
        if epoch % 10 == 0 or epoch == config.epochs - 1:
            log.info("epoch %d: %s", epoch, {k: round(v, 5) for k, v in row.items() if k != "epoch"})
    model.eval()
    if log_path:
        write_training_log(history, log_path)
    return model, history


def write_training_log(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TRAIN_LOG_FIELDS)
        writer.writeheader()
        writer.writerows(history)


def evaluate_objective(model, bundles, env, thresholds, config) -> dict:
    """Mean training-objective components on line proposals for a held-out set."""
    data = TrainingData.from_bundles(bundles)
    with torch.no_grad():
        pred = model(torch.from_numpy(data.lines).float())
        total, parts = training_objective(
            pred,
            torch.from_numpy(data.truth).float(),
            torch.from_numpy(data.ref_lengths).float(),
            env,
            thresholds.inflated(config.train_margin),
            config.loss_weights,
        )
    return dict(zip(TRAIN_LOG_FIELDS[1:], [p.item() for p in parts] + [total.item()]))
