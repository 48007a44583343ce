"""Frontier extraction, temporal/semantic value map, diverse top-k, A*."""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .geometry import Cell, cell_center
from .memory import FREE, UNKNOWN, AgentMemory, OccupancyGrid

ALPHABET = "abcdefghijklmnopqrstuvwxyz "
_CODE = {ch: n for n, ch in enumerate(ALPHABET)}
EMBED_DIM = len(ALPHABET) ** 3


class GoalBlocked(ValueError):
    pass


def normalize_text(text: str) -> str:
    chars = [ch if "a" <= ch <= "z" else " " for ch in text.lower()]
    return " " + " ".join("".join(chars).split()) + " "


@lru_cache(maxsize=4096)
def _trigram_counts(text: str) -> tuple[tuple[int, float], ...]:
    t = normalize_text(text)
    counts: dict[int, float] = {}
    for k in range(len(t) - 2):
        a, b, c = (_CODE[ch] for ch in t[k:k + 3])
        idx = (a * 27 + b) * 27 + c
        counts[idx] = counts.get(idx, 0.0) + 1.0
    norm = math.sqrt(sum(v * v for v in counts.values()))
    return tuple(sorted((k, v / norm) for k, v in counts.items())) if norm else ()


def embed(text: str) -> np.ndarray:
    """L2-normalised character-trigram vector (27-letter alphabet)."""
    vec = np.zeros(EMBED_DIM)
    for k, v in _trigram_counts(text):
        vec[k] = v
    return vec


@lru_cache(maxsize=65536)
def similarity(a: str, b: str) -> float:
    """Dot product of the trigram embeddings, clamped to [0, 1]."""
    ca = dict(_trigram_counts(a))
    dot = sum(v * ca.get(k, 0.0) for k, v in _trigram_counts(b))
    return min(1.0, max(0.0, dot))


def temporal_value(last_seen: float, now: float, tau: float) -> float:
    if math.isinf(last_seen):
        return 1.0
    return min(1.0, max(0.0, now - last_seen) / tau)


def semantic_value(memory: AgentMemory, cell: Cell, queries, radius: float) -> float:
    """Best query match among labels observed within ``radius`` metres of ``cell``."""
    if not queries:
        return 0.0
    cs = memory.cell_size
    best = 0.0
    for c, counts in memory.semantic.labels.items():
        if math.hypot(c[0] - cell[0], c[1] - cell[1]) * cs > radius:
            continue
        for label in counts:
            for q in queries:
                best = max(best, similarity(label, q))
    return best


@dataclass
class Frontier:
    cell: Cell
    v_t: float = 0.0
    v_s: float = 0.0

    @property
    def value(self) -> float:
        return self.v_t + self.v_s


def extract_frontiers(occupancy: OccupancyGrid) -> list[Frontier]:
    """Free cells 4-adjacent to unknown space, in row-major order."""
    g = occupancy.cells
    unknown = g == UNKNOWN
    near = np.zeros_like(unknown)
    near[1:, :] |= unknown[:-1, :]
    near[:-1, :] |= unknown[1:, :]
    near[:, 1:] |= unknown[:, :-1]
    near[:, :-1] |= unknown[:, 1:]
    ys, xs = np.nonzero((g == FREE) & near)
    return [Frontier((int(x), int(y))) for y, x in zip(ys, xs)]


def score_frontiers(memory: AgentMemory, frontiers: list[Frontier], queries, now: int, tau: float,
                    radius: float) -> list[Frontier]:
    for f in frontiers:
        f.v_t = temporal_value(float(memory.semantic.last_seen[f.cell[1], f.cell[0]]), now, tau)
        f.v_s = semantic_value(memory, f.cell, queries, radius)
    return frontiers


def _order_key(f: Frontier):
    return (-f.value, f.cell[1], f.cell[0])


def select_topk_diverse(frontiers: list[Frontier], k: int, d_min: float, cell_size: float = 1.0) -> list[Frontier]:
    """Greedy by value (ties: lower cell index), skipping anything within d_min of a pick."""
    picked: list[Frontier] = []
    for f in sorted(frontiers, key=_order_key):
        if len(picked) >= k:
            break
        if all(math.hypot(f.cell[0] - p.cell[0], f.cell[1] - p.cell[1]) * cell_size >= d_min for p in picked):
            picked.append(f)
    return picked


def best_frontier(frontiers: list[Frontier]) -> Frontier:
    return min(frontiers, key=_order_key)


_STEPS = ((1, 0), (-1, 0), (0, 1), (0, -1))


def astar(occupancy: OccupancyGrid, start: Cell, goal: Cell) -> list[Cell] | None:
    """4-connected A* with a Manhattan heuristic over known-free cells.

    Among equal f-scores the lower cell index pops first. Returns the cell
    path including both endpoints, or ``None`` when no path exists.
    """
    if not occupancy.in_bounds(goal) or occupancy.state(goal) not in (FREE, UNKNOWN):
        raise GoalBlocked(goal)
    if not occupancy.is_free(goal) or not occupancy.is_free(start):
        return None
    w = occupancy.width
    free = occupancy.cells == FREE
    g = {start: 0}
    parent: dict[Cell, Cell] = {}
    heap = [(abs(start[0] - goal[0]) + abs(start[1] - goal[1]), start[1] * w + start[0], start)]
    closed = set()
    while heap:
        _, _, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal:
            path = [cur]
            while cur in parent:
                cur = parent[cur]
                path.append(cur)
            return path[::-1]
        closed.add(cur)
        gc = g[cur] + 1
        for dx, dy in _STEPS:
            nb = (cur[0] + dx, cur[1] + dy)
            if not (0 <= nb[0] < w and 0 <= nb[1] < occupancy.height) or not free[nb[1], nb[0]]:
                continue
            if nb in closed or gc >= g.get(nb, math.inf):
                continue
            g[nb] = gc
            parent[nb] = cur
            heapq.heappush(heap, (gc + abs(nb[0] - goal[0]) + abs(nb[1] - goal[1]), nb[1] * w + nb[0], nb))
    return None


def bfs_distances(occupancy: OccupancyGrid, start: Cell) -> dict[Cell, int]:
    """Step counts from ``start`` to every reachable known-free cell."""
    if not occupancy.is_free(start):
        return {}
    free = occupancy.cells == FREE
    dist = {start: 0}
    q = deque([start])
    while q:
        cur = q.popleft()
        for dx, dy in _STEPS:
            nb = (cur[0] + dx, cur[1] + dy)
            if nb in dist or not (0 <= nb[0] < occupancy.width and 0 <= nb[1] < occupancy.height):
                continue
            if free[nb[1], nb[0]]:
                dist[nb] = dist[cur] + 1
                q.append(nb)
    return dist


def path_length(path: list[Cell], cell_size: float) -> float:
    return (len(path) - 1) * cell_size


@dataclass
class FrontierView:
    """What the camera would show when standing at a frontier looking outward."""

    cell: Cell
    heading: float
    categories: dict[str, int] = field(default_factory=dict)
    free_fraction: float = 0.0


def outward_heading(occupancy: OccupancyGrid, cell: Cell, cell_size: float) -> float:
    """Direction from the frontier cell toward the centroid of its unknown neighbourhood."""
    sx = sy = 0.0
    for dy in range(-2, 3):
        for dx in range(-2, 3):
            c = (cell[0] + dx, cell[1] + dy)
            if occupancy.in_bounds(c) and occupancy.state(c) == UNKNOWN:
                sx += dx
                sy += dy
    if sx == 0.0 and sy == 0.0:
        return 0.0
    return math.atan2(sy, sx)


def frontier_center(f: Frontier, cell_size: float) -> tuple[float, float]:
    return cell_center(f.cell, cell_size)
