"""Neural trajectory model: 4D coordinate embedding, transformer encoder, 4D projection head."""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

FORMAT_VERSION = "ntm-ckpt/1"
_MAGIC = b"NTMCKPT\n"
_RANGE_TOL = 1e-6


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NtmConfig:
    width: int = 128
    layers: int = 4
    heads: int = 4
    ff_width: int = 256
    horizon: int = 32
    n_agents: int = 8
    attention: str = "factored"
    max_frequency: float = 16.0
    # training
    batch_size: int = 16
    lr: float = 1e-3
    epochs: int = 200
    loss_weights: tuple[float, float, float, float] = (1.0, 10.0, 10.0, 1.0)
    train_margin: float = 0.02
    augment: bool = False
    deconflict_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.width, self.layers, self.heads, self.ff_width, self.horizon, self.n_agents) < 1:
            raise ValueError("all sizes must be >= 1")
        if self.width % 4 or self.width % self.heads:
            raise ValueError("width must be divisible by 4 and by the head count")
        if self.attention not in ("full", "factored"):
            raise ValueError("attention must be 'full' or 'factored'")
        if len(self.loss_weights) != 4 or min(self.loss_weights) < 0:
            raise ValueError("loss_weights must be four non-negative numbers")
        object.__setattr__(self, "loss_weights", tuple(float(x) for x in self.loss_weights))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NtmConfig":
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = tuple(d["loss_weights"])
        return cls(**d)


def sinusoid_frequencies(n_features: int, max_frequency: float) -> torch.Tensor:
    k = math.ceil(n_features / 2)
    if k == 1:
        return torch.tensor([math.pi], dtype=torch.float64)
    expo = torch.arange(k, dtype=torch.float64) / (k - 1)
    return math.pi * max_frequency**expo


def check_normalized(coords: torch.Tensor) -> None:
    t, p = coords[..., 0], coords[..., 1:]
    if (t < -_RANGE_TOL).any() or (t > 1 + _RANGE_TOL).any():
        raise ValueError("timestamps must be normalized to [0, 1]")
    if (p.abs() > 1 + _RANGE_TOL).any():
        raise ValueError("positions must be normalized to [-1, 1]")


def sinusoidal_features(coords: torch.Tensor, n_per_channel: int, max_frequency: float) -> torch.Tensor:
    """Per-channel (t, x, y, z) sin/cos features, interleaved, ``4 * n_per_channel`` wide."""
    freqs = sinusoid_frequencies(n_per_channel, max_frequency).to(coords.dtype)
    ang = coords[..., None] * freqs  # (..., 4, K)
    feats = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).flatten(-2)[..., :n_per_channel]
    return feats.flatten(-2)


class CoordinateEmbedder(nn.Module):
    def __init__(self, width: int, max_frequency: float = 16.0):
        super().__init__()
        self.n_per_channel = width // 4
        self.max_frequency = max_frequency
        self.proj = nn.Linear(4 * self.n_per_channel, width)

    def features(self, coords: torch.Tensor) -> torch.Tensor:
        check_normalized(coords)
        return sinusoidal_features(coords, self.n_per_channel, self.max_frequency)

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        return self.proj(self.features(coords))


class _Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm(x)
        return x + self.attn(h, h, h, need_weights=False)[0]


class _FeedForward(nn.Module):
    def __init__(self, width: int, ff_width: int):
        super().__init__()
        self.net = nn.Sequential(nn.LayerNorm(width), nn.Linear(width, ff_width), nn.GELU(), nn.Linear(ff_width, width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.net(x)


class EncoderBlock(nn.Module):
    """Pre-norm residual block over tokens shaped ``(B, N, L, W)``.

    ``full``: one attention over all ``N * L`` tokens. ``factored``: attention
    along each agent's own waypoints, then across agents at each waypoint index.
    """

    def __init__(self, width: int, heads: int, ff_width: int, attention: str):
        super().__init__()
        self.attention = attention
        if attention == "full":
            self.attn = _Attention(width, heads)
        else:
            self.temporal = _Attention(width, heads)
            self.cross = _Attention(width, heads)
        self.ff = _FeedForward(width, ff_width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, l, w = x.shape
        if self.attention == "full":
            x = self.attn(x.reshape(b, n * l, w)).reshape(b, n, l, w)
        else:
            x = self.temporal(x.reshape(b * n, l, w)).reshape(b, n, l, w)
            x = x.transpose(1, 2).reshape(b * l, n, w)
            x = self.cross(x).reshape(b, l, n, w).transpose(1, 2)
        return self.ff(x)


class NeuralTrajectoryModel(nn.Module):
    """Maps proposal bundles ``(B, N, T + 1, 4)`` to refined bundles of the same shape.

    The head predicts residuals added to the proposal; first and last
    waypoints are then overwritten with the proposal's endpoints.
    """

    def __init__(self, config: NtmConfig):
        super().__init__()
        self.config = config
        self.embed = CoordinateEmbedder(config.width, config.max_frequency)
        self.blocks = nn.ModuleList(
            EncoderBlock(config.width, config.heads, config.ff_width, config.attention) for _ in range(config.layers)
        )
        self.norm = nn.LayerNorm(config.width)
        self.head = nn.Linear(config.width, 4)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, proposal: torch.Tensor) -> torch.Tensor:
        squeeze = proposal.dim() == 3
        if squeeze:
            proposal = proposal[None]
        if proposal.dim() != 4 or proposal.shape[-1] != 4:
            raise ValueError(f"expected (B, N, T+1, 4) proposals, got {tuple(proposal.shape)}")
        if proposal.shape[-2] != self.config.horizon + 1:
            raise ValueError(
                f"proposal has {proposal.shape[-2]} waypoints, model expects {self.config.horizon + 1}"
            )
        x = self.embed(proposal)
        for block in self.blocks:
            x = block(x)
        out = proposal + self.head(self.norm(x))
        out = torch.cat([proposal[..., :1, :], out[..., 1:-1, :], proposal[..., -1:, :]], dim=-2)
        return out[0] if squeeze else out


def build_model(config: NtmConfig) -> NeuralTrajectoryModel:
    torch.manual_seed(config.seed)
    return NeuralTrajectoryModel(config)


# --- checkpoints --------------------------------------------------------------


def params_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_params(
    model: NeuralTrajectoryModel,
    path: str | Path,
    env_hash: str | None = None,
    normalization: dict | None = None,
    extra: dict | None = None,
) -> None:
    """Write a checkpoint atomically: magic, header length, JSON header, raw tensors."""
    tensors, blobs, offset = [], [], 0
    for name, t in sorted(model.state_dict().items()):
        arr = t.detach().cpu().contiguous().numpy()
        raw = arr.tobytes()
        tensors.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "env_hash": env_hash,
        "normalization": normalization,
        "tensors": tensors,
        "blob_nbytes": offset,
        **(extra or {}),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<Q", len(hbytes)))
            f.write(hbytes)
            for raw in blobs:
                f.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as f:
        data = f.read(len(_MAGIC) + 8)
        if len(data) < len(_MAGIC) + 8 or data[: len(_MAGIC)] != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated)")
        (hlen,) = struct.unpack("<Q", data[len(_MAGIC) :])
        hbytes = f.read(hlen)
    if len(hbytes) != hlen:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(hbytes)
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format {header.get('format_version')!r}")
    return header


def load_params(
    path: str | Path, expected_env_hash: str | None = None
) -> tuple[NeuralTrajectoryModel, NtmConfig, dict]:
    header = read_header(path)
    if expected_env_hash is not None and header.get("env_hash") != expected_env_hash:
        raise CheckpointError(
            f"{path}: environment hash mismatch (checkpoint {header.get('env_hash')}, expected {expected_env_hash})"
        )
    raw = Path(path).read_bytes()
    start = len(_MAGIC) + 8 + struct.unpack("<Q", raw[len(_MAGIC) : len(_MAGIC) + 8])[0]
    blob = raw[start:]
    if len(blob) != header["blob_nbytes"]:
        raise CheckpointError(f"{path}: truncated weights ({len(blob)} of {header['blob_nbytes']} bytes)")
    config = NtmConfig.from_dict(header["config"])
    model = NeuralTrajectoryModel(config)
    state = {}
    for spec in header["tensors"]:
        arr = np.frombuffer(blob, dtype=spec["dtype"], count=int(np.prod(spec["shape"], dtype=np.int64)), offset=spec["offset"])
        state[spec["name"]] = torch.from_numpy(arr.reshape(spec["shape"]).copy())
    model.load_state_dict(state)
    model.eval()
    return model, config, header
