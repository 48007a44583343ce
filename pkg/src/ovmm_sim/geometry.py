"""Grid geometry: cell/world conversion and exact line-of-sight traversal.

Cell ``(i, j)`` is centred on world point ``(i * cell_size, j * cell_size)``
and covers the half-open square ``[i - 0.5, i + 0.5) x [j - 0.5, j + 0.5)`` in
cell units. Cells are ``(x_index, y_index)`` tuples; "row-major" order sorts
by ``(y_index, x_index)``.
"""

from __future__ import annotations

import math
from typing import Iterable, Iterator

Cell = tuple[int, int]

_EPS = 1e-9


def to_cell(x: float, y: float, cell_size: float) -> Cell:
    return (math.floor(x / cell_size + 0.5), math.floor(y / cell_size + 0.5))


def cell_center(cell: Cell, cell_size: float) -> tuple[float, float]:
    return (cell[0] * cell_size, cell[1] * cell_size)


def cell_index(cell: Cell, width: int) -> int:
    return cell[1] * width + cell[0]


def row_major(cells: Iterable[Cell]) -> list[Cell]:
    return sorted(cells, key=lambda c: (c[1], c[0]))


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def traverse(p0: tuple[float, float], p1: tuple[float, float], cell_size: float) -> Iterator[Cell]:
    """Yield the cells whose open interior the segment p0 -> p1 passes through.

    Amanatides-Woo traversal. When the segment crosses a cell corner exactly,
    both axes advance together, so the two cells that only share the corner
    point are not reported.
    """
    u0, v0 = p0[0] / cell_size + 0.5, p0[1] / cell_size + 0.5
    u1, v1 = p1[0] / cell_size + 0.5, p1[1] / cell_size + 0.5
    i, j = math.floor(u0), math.floor(v0)
    i_end, j_end = math.floor(u1), math.floor(v1)
    du, dv = u1 - u0, v1 - v0
    yield (i, j)
    if (i, j) == (i_end, j_end):
        return

    if du > 0:
        step_i, t_max_u, t_delta_u = 1, (i + 1 - u0) / du, 1.0 / du
    elif du < 0:
        step_i, t_max_u, t_delta_u = -1, (i - u0) / du, -1.0 / du
    else:
        step_i, t_max_u, t_delta_u = 0, math.inf, math.inf
    if dv > 0:
        step_j, t_max_v, t_delta_v = 1, (j + 1 - v0) / dv, 1.0 / dv
    elif dv < 0:
        step_j, t_max_v, t_delta_v = -1, (j - v0) / dv, -1.0 / dv
    else:
        step_j, t_max_v, t_delta_v = 0, math.inf, math.inf

    limit = abs(i_end - i) + abs(j_end - j) + 2
    for _ in range(limit):
        if t_max_u < t_max_v - _EPS:
            t = t_max_u
            i += step_i
            t_max_u += t_delta_u
        elif t_max_v < t_max_u - _EPS:
            t = t_max_v
            j += step_j
            t_max_v += t_delta_v
        else:
            t = t_max_u
            i += step_i
            j += step_j
            t_max_u += t_delta_u
            t_max_v += t_delta_v
        if t >= 1.0 - _EPS:
            return
        yield (i, j)
        if (i, j) == (i_end, j_end):
            return


def line_blocked(p0, p1, obstacles, cell_size: float) -> bool:
    """True if any obstacle cell strictly between the endpoints' cells is crossed."""
    start = to_cell(p0[0], p0[1], cell_size)
    end = to_cell(p1[0], p1[1], cell_size)
    for c in traverse(p0, p1, cell_size):
        if c != start and c != end and c in obstacles:
            return True
    return False

