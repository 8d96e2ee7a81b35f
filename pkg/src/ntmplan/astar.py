"""26-connected A* over an occupancy grid, used to seed ground-truth trajectories."""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .sdf import OccupancyGrid
from .trajectory import resample_trajectory

DEFAULT_SNAP_RADIUS = 2
DEFAULT_MAX_EXPANSIONS = 2_000_000

NEIGHBOR_OFFSETS = tuple(o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0))


@dataclass(frozen=True)
class GridPath:
    cells: np.ndarray  # (K, 3) integer indices
    world_points: np.ndarray  # (K, 3) cell centers
    cost: float
    expansions: int = 0


def snap_to_free(grid: OccupancyGrid, p, radius: int = DEFAULT_SNAP_RADIUS):
    """Nearest free cell to ``p`` within ``radius`` cells (Chebyshev), or None."""
    base = np.asarray(grid.cell_of(p))
    if not grid.occupied[tuple(base)]:
        return tuple(int(x) for x in base)
    p = np.asarray(p, dtype=np.float64)
    best, best_d = None, math.inf
    r = range(-radius, radius + 1)
    for off in itertools.product(r, r, r):
        c = base + off
        if np.any(c < 0) or np.any(c >= grid.shape) or grid.occupied[tuple(c)]:
            continue
        d = float(np.linalg.norm(grid.cell_center(c) - p))
        # offsets iterate in lexicographic order, so strict < keeps the first tie
        if d < best_d:
            best, best_d = tuple(int(x) for x in c), d
    return best


def astar_plan(
    grid: OccupancyGrid,
    start,
    goal,
    snap_radius: int = DEFAULT_SNAP_RADIUS,
    max_expansions: int = DEFAULT_MAX_EXPANSIONS,
) -> GridPath | None:
    """Shortest 26-connected grid path between the cells containing ``start`` and ``goal``.

    Edge weights and the heuristic are Euclidean distances between cell
    centers, so the returned path is cost-optimal. Open-set ties are broken by
    flat (lexicographic) cell index. Returns None when either endpoint cannot
    be snapped to a free cell or the expansion budget runs out.
    """
    s_cell = snap_to_free(grid, start, snap_radius)
    g_cell = snap_to_free(grid, goal, snap_radius)
    if s_cell is None or g_cell is None:
        return None

    nx, ny, nz = grid.shape
    occ = grid.occupied.ravel()
    hx, hy, hz = (float(v) for v in grid.cell_size)
    steps = []
    for di, dj, dk in NEIGHBOR_OFFSETS:
        steps.append((di, dj, dk, di * ny * nz + dj * nz + dk, math.sqrt((di * hx) ** 2 + (dj * hy) ** 2 + (dk * hz) ** 2)))

    def flat(c):
        return (c[0] * ny + c[1]) * nz + c[2]

    gi, gj, gk = g_cell
    goal_idx = flat(g_cell)

    def h(i, j, k):
        return math.sqrt(((i - gi) * hx) ** 2 + ((j - gj) * hy) ** 2 + ((k - gk) * hz) ** 2)

    start_idx = flat(s_cell)
    g_score = {start_idx: 0.0}
    parent = {start_idx: -1}
    closed = set()
    open_heap = [(h(*s_cell), start_idx)]
    expansions = 0
    sqrt = math.sqrt
    while open_heap:
        f, cur = heapq.heappop(open_heap)
        if cur in closed:
            continue
        if cur == goal_idx:
            break
        closed.add(cur)
        expansions += 1
        if expansions > max_expansions:
            return None
        ci, rem = divmod(cur, ny * nz)
        cj, ck = divmod(rem, nz)
        g_cur = g_score[cur]
        for di, dj, dk, dflat, w in steps:
            i, j, k = ci + di, cj + dj, ck + dk
            if i < 0 or j < 0 or k < 0 or i >= nx or j >= ny or k >= nz:
                continue
            nb = cur + dflat
            if occ[nb] or nb in closed:
                continue
            g_new = g_cur + w
            if g_new < g_score.get(nb, math.inf):
                g_score[nb] = g_new
                parent[nb] = cur
                hh = sqrt(((i - gi) * hx) ** 2 + ((j - gj) * hy) ** 2 + ((k - gk) * hz) ** 2)
                heapq.heappush(open_heap, (g_new + hh, nb))
    else:
        return None

    chain = [goal_idx]
    while parent[chain[-1]] != -1:
        chain.append(parent[chain[-1]])
    chain.reverse()
    cells = np.array([np.unravel_index(c, grid.shape) for c in chain], dtype=int)
    return GridPath(cells, grid.cell_center(cells), g_score[goal_idx], expansions)


def path_to_trajectory(path: GridPath, start, goal, horizon: int) -> np.ndarray:
    """Fixed-horizon trajectory along ``path`` with its end cells replaced by the exact endpoints."""
    if len(path.world_points) == 0:
        raise ValueError("empty path")
    pts = np.asarray(path.world_points, dtype=np.float64)
    if len(pts) == 1:
        pts = np.stack([start, goal]).astype(np.float64)
    else:
        pts = pts.copy()
        pts[0], pts[-1] = start, goal
    return resample_trajectory(pts, horizon)
