"""Procedural obstacle worlds written in the environment JSON format."""

from __future__ import annotations

import numpy as np

from .sdf import Box, Capsule, Cylinder, EnvironmentSdf, Sphere

KINDS = ("sphere-forest", "box-city", "capsule-grove")
MAX_OBSTACLES = 200
MIN_FREE_FRACTION = 0.05


class InfeasibleDensity(ValueError):
    pass


def _r(x) -> float:
    # rounded coordinates keep files short and stable across platforms
    return round(float(x), 6)


def generate_environment(kind: str, density: int, seed: int = 0, half_extent: float = 1.0) -> EnvironmentSdf:
    """Random world of ``density`` obstacles inside a cube of the given half extent."""
    if kind not in KINDS:
        raise ValueError(f"unknown environment kind {kind!r}; choose from {KINDS}")
    if density < 0 or density > MAX_OBSTACLES:
        raise InfeasibleDensity(f"density must be in [0, {MAX_OBSTACLES}], got {density}")
    rng = np.random.default_rng(seed)
    s = half_extent
    prims = []
    for _ in range(density):
        if kind == "sphere-forest":
            c = rng.uniform(-0.8 * s, 0.8 * s, 3)
            prims.append(Sphere(tuple(map(_r, c)), _r(rng.uniform(0.1, 0.2) * s)))
        elif kind == "box-city":
            xy = rng.uniform(-0.85 * s, 0.85 * s, 2)
            half = rng.uniform(0.05, 0.12, 2) * s
            height = rng.uniform(0.3, 1.4) * s
            c = (xy[0], xy[1], -s + height / 2)
            prims.append(Box(tuple(map(_r, c)), (_r(half[0]), _r(half[1]), _r(height / 2))))
        else:
            base = rng.uniform(-0.85 * s, 0.85 * s, 2)
            lean = rng.normal(0.0, 0.15, 2) * s
            top = rng.uniform(0.0, 0.8) * s
            radius = rng.uniform(0.05, 0.1) * s
            if rng.random() < 0.3:
                hh = (top + s) / 2
                prims.append(Cylinder((_r(base[0]), _r(base[1]), _r(-s + hh)), _r(radius), _r(hh)))
            else:
                a = (base[0], base[1], -s)
                b = (base[0] + lean[0], base[1] + lean[1], top)
                prims.append(Capsule(tuple(map(_r, a)), tuple(map(_r, b)), _r(radius)))
    env = EnvironmentSdf(tuple(prims), ((-s, -s, -s), (s, s, s)))
    probe = np.random.default_rng(seed).uniform(env.lo, env.hi, size=(4000, 3))
    free = float(np.mean(env.distance(probe) > 0))
    if free < MIN_FREE_FRACTION:
        raise InfeasibleDensity(f"free-space fraction {free:.3f} below {MIN_FREE_FRACTION}")
    return env


def free_fraction(env: EnvironmentSdf, samples: int = 20000, seed: int = 0) -> float:
    pts = np.random.default_rng(seed).uniform(env.lo, env.hi, size=(samples, 3))
    return float(np.mean(env.distance(pts) > 0))
