"""Analytic signed distance fields built from a union of simple primitives.

Distances are negative inside an obstacle, zero on its surface and positive in
free space. The composite field is the minimum over primitives; ties go to the
lowest primitive index so gradients are deterministic.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

_EPS = 1e-12


class EnvironmentTooDense(ValueError):
    """Raised when rejection sampling cannot find enough free points."""


def _as_points(p) -> np.ndarray:
    pts = np.asarray(p, dtype=np.float64)
    if pts.shape[-1] != 3:
        raise ValueError(f"points must have a trailing dimension of 3, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    return pts.reshape(-1, 3)


def _safe_unit(v: np.ndarray) -> np.ndarray:
    """Row-normalize ``v``; zero rows map to +x so the result is always unit."""
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    out = np.where(n > _EPS, v / np.maximum(n, _EPS), 0.0)
    zero = n[:, 0] <= _EPS
    out[zero] = (1.0, 0.0, 0.0)
    return out


def _box_distance(q: np.ndarray, half: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distance and gradient of a centered axis-aligned box at local points ``q``."""
    sgn = np.where(q >= 0.0, 1.0, -1.0)
    d = np.abs(q) - half
    outside = np.maximum(d, 0.0)
    out_norm = np.linalg.norm(outside, axis=1)
    inner = np.minimum(d.max(axis=1), 0.0)
    dist = out_norm + inner

    grad = np.zeros_like(q)
    is_out = out_norm > 0.0
    grad[is_out] = sgn[is_out] * outside[is_out] / out_norm[is_out, None]
    axis = np.argmax(d, axis=1)
    rows = np.nonzero(~is_out)[0]
    grad[rows, axis[rows]] = sgn[rows, axis[rows]]
    return dist, grad


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    kind: str = field(default="sphere", init=False)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def distance(self, pts: np.ndarray) -> np.ndarray:
        return np.linalg.norm(pts - np.asarray(self.center), axis=1) - self.radius

    def gradient(self, pts: np.ndarray) -> np.ndarray:
        return _safe_unit(pts - np.asarray(self.center))

    def transformed(self, offset: np.ndarray, scale: float) -> "Sphere":
        c = (np.asarray(self.center) - offset) / scale
        return Sphere(tuple(float(x) for x in c), self.radius / scale)

    def to_dict(self) -> dict:
        return {"kind": "sphere", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by its center and half-extents."""

    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    kind: str = field(default="box", init=False)

    def __post_init__(self):
        if not all(h > 0 for h in self.half_extents):
            raise ValueError("box half-extents must be positive")

    def distance(self, pts: np.ndarray) -> np.ndarray:
        return _box_distance(pts - np.asarray(self.center), np.asarray(self.half_extents))[0]

    def gradient(self, pts: np.ndarray) -> np.ndarray:
        return _box_distance(pts - np.asarray(self.center), np.asarray(self.half_extents))[1]

    def transformed(self, offset: np.ndarray, scale: float) -> "Box":
        c = (np.asarray(self.center) - offset) / scale
        return Box(tuple(float(x) for x in c), tuple(float(h / scale) for h in self.half_extents))

    def to_dict(self) -> dict:
        return {"kind": "box", "center": list(self.center), "half_extents": list(self.half_extents)}


@dataclass(frozen=True)
class Capsule:
    """Segment from ``a`` to ``b`` swept by a ball of ``radius``."""

    a: tuple[float, float, float]
    b: tuple[float, float, float]
    radius: float
    kind: str = field(default="capsule", init=False)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("capsule radius must be positive")
        if np.linalg.norm(np.subtract(self.b, self.a)) <= 0:
            raise ValueError("capsule endpoints must differ")

    def _offset(self, pts: np.ndarray) -> np.ndarray:
        a = np.asarray(self.a)
        ab = np.asarray(self.b) - a
        h = np.clip((pts - a) @ ab / (ab @ ab), 0.0, 1.0)
        return pts - (a + h[:, None] * ab)

    def distance(self, pts: np.ndarray) -> np.ndarray:
        return np.linalg.norm(self._offset(pts), axis=1) - self.radius

    def gradient(self, pts: np.ndarray) -> np.ndarray:
        return _safe_unit(self._offset(pts))

    def transformed(self, offset: np.ndarray, scale: float) -> "Capsule":
        a = (np.asarray(self.a) - offset) / scale
        b = (np.asarray(self.b) - offset) / scale
        return Capsule(tuple(float(x) for x in a), tuple(float(x) for x in b), self.radius / scale)

    def to_dict(self) -> dict:
        return {"kind": "capsule", "a": list(self.a), "b": list(self.b), "radius": self.radius}


@dataclass(frozen=True)
class Cylinder:
    """Capped cylinder with a vertical (z) axis."""

    center: tuple[float, float, float]
    radius: float
    half_height: float
    kind: str = field(default="cylinder", init=False)

    def __post_init__(self):
        if not (self.radius > 0 and self.half_height > 0):
            raise ValueError("cylinder radius and half-height must be positive")

    def _parts(self, pts: np.ndarray):
        q = pts - np.asarray(self.center)
        rho = np.linalg.norm(q[:, :2], axis=1)
        d = np.stack([rho - self.radius, np.abs(q[:, 2]) - self.half_height], axis=1)
        return q, rho, d

    def distance(self, pts: np.ndarray) -> np.ndarray:
        _, _, d = self._parts(pts)
        return np.minimum(d.max(axis=1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=1)

    def gradient(self, pts: np.ndarray) -> np.ndarray:
        q, rho, d = self._parts(pts)
        radial = np.zeros_like(q)
        has_rho = rho > _EPS
        radial[has_rho, :2] = q[has_rho, :2] / rho[has_rho, None]
        radial[~has_rho, 0] = 1.0
        axial = np.zeros_like(q)
        axial[:, 2] = np.where(q[:, 2] >= 0.0, 1.0, -1.0)

        outside = np.maximum(d, 0.0)
        n = np.linalg.norm(outside, axis=1)
        grad = np.empty_like(q)
        is_out = n > 0.0
        w = outside[is_out] / n[is_out, None]
        grad[is_out] = w[:, :1] * radial[is_out] + w[:, 1:] * axial[is_out]
        inside = ~is_out
        use_radial = d[:, 0] >= d[:, 1]
        grad[inside & use_radial] = radial[inside & use_radial]
        grad[inside & ~use_radial] = axial[inside & ~use_radial]
        return grad

    def transformed(self, offset: np.ndarray, scale: float) -> "Cylinder":
        c = (np.asarray(self.center) - offset) / scale
        return Cylinder(tuple(float(x) for x in c), self.radius / scale, self.half_height / scale)

    def to_dict(self) -> dict:
        return {
            "kind": "cylinder",
            "center": list(self.center),
            "radius": self.radius,
            "half_height": self.half_height,
        }


Primitive = Sphere | Box | Capsule | Cylinder


def primitive_from_dict(d: dict) -> Primitive:
    kind = d.get("kind")
    if kind == "sphere":
        return Sphere(tuple(map(float, d["center"])), float(d["radius"]))
    if kind == "box":
        return Box(tuple(map(float, d["center"])), tuple(map(float, d["half_extents"])))
    if kind == "capsule":
        return Capsule(tuple(map(float, d["a"])), tuple(map(float, d["b"])), float(d["radius"]))
    if kind == "cylinder":
        return Cylinder(tuple(map(float, d["center"])), float(d["radius"]), float(d["half_height"]))
    raise ValueError(f"unknown primitive kind {kind!r}")


@dataclass(frozen=True)
class EnvironmentSdf:
    """A static world: obstacle primitives inside an axis-aligned bounding box.

    With no primitives the field falls back to the (positive) distance to the
    bounding box walls, which keeps values finite.
    """

    primitives: tuple[Primitive, ...] = ()
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (-1.0, -1.0, -1.0),
        (1.0, 1.0, 1.0),
    )

    def __post_init__(self):
        lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        if lo.shape != (3,) or hi.shape != (3,) or not np.all(hi > lo):
            raise ValueError("bounds must be ((xmin,ymin,zmin),(xmax,ymax,zmax)) with max > min")
        object.__setattr__(self, "primitives", tuple(self.primitives))

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.bounds[0], dtype=np.float64)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.bounds[1], dtype=np.float64)

    def _all_distances(self, pts: np.ndarray) -> np.ndarray:
        return np.stack([prim.distance(pts) for prim in self.primitives])

    def _bounds_field(self, pts: np.ndarray):
        center = (self.lo + self.hi) / 2
        d, g = _box_distance(pts - center, (self.hi - self.lo) / 2)
        return -d, -g

    def distance(self, p) -> np.ndarray:
        """Signed distance at each of the ``(..., 3)`` points."""
        arr = np.asarray(p, dtype=np.float64)
        pts = _as_points(arr)
        if not self.primitives:
            d = self._bounds_field(pts)[0]
        else:
            d = self._all_distances(pts).min(axis=0)
        return d.reshape(arr.shape[:-1])

    def gradient(self, p) -> np.ndarray:
        """Gradient of the active primitive at each point, shape ``(..., 3)``."""
        return self.distance_and_gradient(p)[1]

    def distance_and_gradient(self, p) -> tuple[np.ndarray, np.ndarray]:
        arr = np.asarray(p, dtype=np.float64)
        pts = _as_points(arr)
        if not self.primitives:
            d, g = self._bounds_field(pts)
        else:
            all_d = self._all_distances(pts)
            active = np.argmin(all_d, axis=0)
            d = all_d[active, np.arange(len(pts))]
            g = np.empty_like(pts)
            for idx in np.unique(active):
                sel = active == idx
                g[sel] = self.primitives[idx].gradient(pts[sel])
        return d.reshape(arr.shape[:-1]), g.reshape(arr.shape)

    # normalization: uniform scale keeps distances meaningful
    @property
    def norm_center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2

    @property
    def norm_scale(self) -> float:
        return float(np.max(self.hi - self.lo) / 2)

    def to_normalized(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - self.norm_center) / self.norm_scale

    def from_normalized(self, q) -> np.ndarray:
        return np.asarray(q, dtype=np.float64) * self.norm_scale + self.norm_center

    def normalized(self) -> "EnvironmentSdf":
        """The same world expressed in normalized coordinates (longest axis spans [-1, 1])."""
        c, s = self.norm_center, self.norm_scale
        prims = tuple(prim.transformed(c, s) for prim in self.primitives)
        lo = tuple(float(x) for x in (self.lo - c) / s)
        hi = tuple(float(x) for x in (self.hi - c) / s)
        return EnvironmentSdf(prims, (lo, hi))

    def to_dict(self) -> dict:
        return {
            "bounds": {"min": list(self.bounds[0]), "max": list(self.bounds[1])},
            "primitives": [prim.to_dict() for prim in self.primitives],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvironmentSdf":
        b = d.get("bounds", {"min": [-1, -1, -1], "max": [1, 1, 1]})
        bounds = (tuple(map(float, b["min"])), tuple(map(float, b["max"])))
        return cls(tuple(primitive_from_dict(p) for p in d.get("primitives", [])), bounds)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_environment(path: str | Path) -> EnvironmentSdf:
    with open(path) as f:
        return EnvironmentSdf.from_dict(json.load(f))


def save_environment(env: EnvironmentSdf, path: str | Path) -> None:
    Path(path).write_text(json.dumps(env.to_dict(), indent=2, sort_keys=True) + "\n")


def sdf_eval(env: EnvironmentSdf, p) -> float | np.ndarray:
    d = env.distance(p)
    return float(d) if d.ndim == 0 else d


def sdf_grad(env: EnvironmentSdf, p) -> np.ndarray:
    return env.gradient(p)


def sample_free_points(
    env: EnvironmentSdf,
    count: int,
    margin: float = 0.0,
    seed: int | np.random.Generator | Sequence[int] = 0,
    max_draws: int | None = None,
) -> np.ndarray:
    """Uniform rejection sampling of ``count`` points with SDF > ``margin``."""
    if count < 1:
        raise ValueError("count must be positive")
    if margin < 0:
        raise ValueError("margin must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    budget = max_draws if max_draws is not None else max(10_000, 2_000 * count)
    kept: list[np.ndarray] = []
    n_kept = drawn = 0
    batch = max(64, 4 * count)
    while n_kept < count:
        if drawn >= budget:
            raise EnvironmentTooDense(
                f"found {n_kept}/{count} free points after {drawn} draws (margin={margin})"
            )
        pts = rng.uniform(env.lo, env.hi, size=(batch, 3))
        drawn += batch
        ok = pts[env.distance(pts) > margin]
        kept.append(ok)
        n_kept += len(ok)
    return np.concatenate(kept)[:count]


@dataclass(frozen=True)
class OccupancyGrid:
    """Boolean voxelization of an environment over its bounding box."""

    occupied: np.ndarray
    lo: np.ndarray
    cell_size: np.ndarray
    inflation: float = 0.0

    @property
    def resolution(self) -> int:
        return int(self.occupied.shape[0])

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.occupied.shape)

    def cell_center(self, idx) -> np.ndarray:
        return self.lo + (np.asarray(idx, dtype=np.float64) + 0.5) * self.cell_size

    def cell_of(self, p) -> tuple[int, int, int]:
        i = np.floor((np.asarray(p, dtype=np.float64) - self.lo) / self.cell_size).astype(int)
        i = np.clip(i, 0, np.asarray(self.shape) - 1)
        return tuple(int(x) for x in i)

    def centers(self) -> np.ndarray:
        axes = [self.lo[k] + (np.arange(self.shape[k]) + 0.5) * self.cell_size[k] for k in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def rasterize(env: EnvironmentSdf, resolution: int = 64, inflation: float = 0.0) -> OccupancyGrid:
    """Mark every cell whose center lies within ``inflation`` of an obstacle."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    size = (env.hi - env.lo) / resolution
    grid = OccupancyGrid(np.zeros((resolution,) * 3, dtype=bool), env.lo, size, float(inflation))
    d = env.distance(grid.centers())
    return OccupancyGrid(d <= inflation, env.lo, size, float(inflation))

