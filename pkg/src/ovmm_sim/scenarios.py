"""Procedural scenario generation: layout templates, object placement, perturbations."""

from __future__ import annotations

import math
import zlib

import numpy as np

from .drm import TaskInstruction
from .exploration import astar, similarity
from .geometry import cell_center, to_cell
from .metrics import Unreachable, expert_subgoal_lengths, ground_truth_occupancy
from .world import InvalidScenario, world_from_dict

CELL = 0.25

OBJECT_POOL = ("apple", "banana", "coke can", "toy car", "cup", "book", "sponge", "remote", "bottle",
               "teddy bear", "scissors", "tomato")
RECEPTACLE_POOL = ("table", "sink", "bin", "shelf", "box", "basket", "chair", "desk")
DISTRACTOR_POOL = ("pineapple", "mug", "notebook", "tennis ball", "shoe", "plant", "lamp", "pen", "towel")


def _rect(x0, y0, x1, y1):
    """Metre rectangle -> inclusive cell rectangle."""
    return [round(x0 / CELL), round(y0 / CELL), round(x1 / CELL), round(y1 / CELL)]


def _walls_with_doors(x, y0, y1, doors, vertical=True):
    """Wall segment split around door intervals (metres along the wall)."""
    rects, cur = [], y0
    for d0, d1 in sorted(doors):
        if d0 > cur:
            rects.append(_rect(x, cur, x, d0 - CELL) if vertical else _rect(cur, x, d0 - CELL, x))
        cur = d1 + CELL
    if cur <= y1:
        rects.append(_rect(x, cur, x, y1) if vertical else _rect(cur, x, y1, x))
    return rects


TEMPLATES = {
    "office": {
        "size": (12.0, 8.0),
        "rects": [
            _rect(2.0, 2.0, 3.5, 2.75), _rect(5.0, 2.0, 6.5, 2.75), _rect(8.0, 2.0, 9.5, 2.75),
            _rect(2.0, 5.0, 3.5, 5.75), _rect(5.0, 5.0, 6.5, 5.75), _rect(8.0, 5.0, 9.5, 5.75),
            _rect(10.75, 0.5, 11.5, 3.0), _rect(0.0, 3.75, 1.25, 4.0),
        ],
        "p_knock": 0.15,
    },
    "studio": {
        "size": (9.0, 7.0),
        "rects": [
            _rect(0.5, 4.5, 4.0, 5.0), _rect(5.0, 1.0, 7.0, 1.75), _rect(5.5, 4.5, 7.5, 6.25),
            _rect(3.0, 2.0, 3.5, 2.5), _rect(8.5, 2.5, 8.75, 4.0),
        ],
        "p_knock": 0.2,
    },
    "three_room": {
        "size": (12.0, 9.0),
        "rects": (
            _walls_with_doors(4.0, 0.0, 8.75, [(3.5, 4.5)])
            + _walls_with_doors(8.0, 0.0, 8.75, [(6.0, 7.0)])
            + _walls_with_doors(4.5, 8.25, 11.75, [(9.5, 10.5)], vertical=False)
            + [_rect(1.0, 1.0, 2.5, 1.5), _rect(5.5, 6.5, 6.5, 7.5), _rect(9.5, 1.0, 11.0, 1.5)]
        ),
        "p_knock": 0.25,
    },
    "tabletop": {
        "size": (4.0, 4.0),
        "rects": [_rect(1.5, 2.75, 2.5, 3.25)],
        "p_knock": 0.0,
    },
}


def _seed_rng(*parts) -> np.random.Generator:
    return np.random.default_rng([zlib.crc32(repr(p).encode()) for p in parts])


def _base(template: str, seed: int):
    t = TEMPLATES[template]
    w, h = round(t["size"][0] / CELL), round(t["size"][1] / CELL)
    obstacles = set()
    for x0, y0, x1, y1 in t["rects"]:
        for j in range(max(0, y0), min(h - 1, y1) + 1):
            for i in range(max(0, x0), min(w - 1, x1) + 1):
                obstacles.add((i, j))
    return w, h, obstacles


def _open_cells(w, h, obstacles, margin=1):
    out = []
    for j in range(margin, h - margin):
        for i in range(margin, w - margin):
            if all((i + dx, j + dy) not in obstacles for dx in (-1, 0, 1) for dy in (-1, 0, 1)):
                out.append((i, j))
    return out


def _pick(rng, cells, taken_xy, min_sep, avoid=None, min_avoid=0.0):
    order = rng.permutation(len(cells))
    for k in order:
        c = cells[k]
        p = cell_center(c, CELL)
        if any(math.hypot(p[0] - q[0], p[1] - q[1]) < min_sep for q in taken_xy):
            continue
        if avoid is not None and math.hypot(p[0] - avoid[0], p[1] - avoid[1]) < min_avoid:
            continue
        return p
    return None


def _distinct(rng, pool, n, exclude=(), theta=0.35):
    chosen = []
    for k in rng.permutation(len(pool)):
        cat = pool[k]
        if any(similarity(cat, c) >= theta for c in list(chosen) + list(exclude)):
            continue
        chosen.append(cat)
        if len(chosen) == n:
            return chosen
    raise InvalidScenario("category pool too small")


def generate_scenario(template: str, n_subgoals: int, seed: int, dynamic: bool = True,
                      shift_range=(0.15, 0.6), receptacle_move=(1.0, 2.5), n_distractors: int = 3,
                      prefixes: bool = False) -> dict:
    """One randomised scene with an instruction; retries until every route is reachable.

    With ``prefixes`` the file also lists the 1..n-1 subgoal prefixes of the
    instruction after the full one, so every task size runs in the same scene.
    """
    if template not in TEMPLATES:
        raise ValueError(f"unknown template {template!r}")
    for attempt in range(200):
        try:
            data = _generate(template, n_subgoals, seed, attempt, dynamic, shift_range, receptacle_move,
                             n_distractors)
        except (InvalidScenario, Unreachable):
            continue
        if prefixes:
            pairs = data["instructions"][0]["subgoals"]
            data["instructions"] += [TaskInstruction.from_pairs(pairs[:k]).to_dict() for k in range(1, len(pairs))]
        return data
    raise InvalidScenario(f"could not place a valid {template} scene for seed {seed}")


def _generate(template, n, seed, attempt, dynamic, shift_range, receptacle_move, n_distractors) -> dict:
    rng = _seed_rng("scenario", template, n, seed, attempt)
    w, h, obstacles = _base(template, seed)
    cells = _open_cells(w, h, obstacles)
    start = cell_center(cells[rng.integers(len(cells))], CELL)
    objs = _distinct(rng, OBJECT_POOL, n)
    recs = _distinct(rng, RECEPTACLE_POOL, n)
    distractors = _distinct(rng, DISTRACTOR_POOL, n_distractors, exclude=objs + recs)
    taken = [start]
    objects, receptacles = [], []
    far = min(3.0, 0.3 * max(w, h) * CELL)
    for k, cat in enumerate(objs):
        p = _pick(rng, cells, taken, 1.0, start, far)
        if p is None:
            raise InvalidScenario("no room for objects")
        taken.append(p)
        objects.append({"id": f"obj{k}", "category": cat, "x": p[0], "y": p[1], "z": round(float(rng.uniform(0.4, 0.9)), 3)})
    for k, cat in enumerate(recs):
        p = _pick(rng, cells, taken, 1.25, start, 1.5)
        if p is None:
            raise InvalidScenario("no room for receptacles")
        taken.append(p)
        receptacles.append({"id": f"rec{k}", "category": cat, "x": p[0], "y": p[1],
                            "surface_height": round(float(rng.uniform(0.4, 0.9)), 3)})
    for k, cat in enumerate(distractors):
        p = _pick(rng, cells, taken, 0.75)
        if p is None:
            raise InvalidScenario("no room for distractors")
        taken.append(p)
        objects.append({"id": f"dis{k}", "category": cat, "x": p[0], "y": p[1], "z": round(float(rng.uniform(0.2, 0.9)), 3)})

    events = []
    if dynamic:
        for k in range(n):
            o = objects[k]
            for _ in range(50):
                mag = float(rng.uniform(*shift_range))
                ang = float(rng.uniform(-math.pi, math.pi))
                nx, ny = o["x"] + mag * math.cos(ang), o["y"] + mag * math.sin(ang)
                c = to_cell(nx, ny, CELL)
                if c in set(cells) and all(math.hypot(nx - q[0], ny - q[1]) >= 0.4 for q in taken if q != (o["x"], o["y"])):
                    break
            else:
                raise InvalidScenario("no valid shift")
            events.append({"trigger": {"type": "phase_entered", "phase": "grasp", "target": o["id"]},
                           "effect": {"type": "move_object", "target": o["id"], "x": round(nx, 4), "y": round(ny, 4)}})
            r = receptacles[k]
            lo, hi = receptacle_move
            moved = [c for c in cells
                     if lo <= math.hypot(cell_center(c, CELL)[0] - r["x"], cell_center(c, CELL)[1] - r["y"]) <= hi]
            p = _pick(rng, moved, [q for q in taken if q != (r["x"], r["y"])], 0.75)
            if p is None:
                raise InvalidScenario("no valid receptacle move")
            events.append({"trigger": {"type": "phase_entered", "phase": "navigate", "target": r["id"]},
                           "effect": {"type": "move_receptacle", "target": r["id"], "x": p[0], "y": p[1]}})

    task = TaskInstruction.from_pairs(list(zip(objs, recs)))
    data = {
        "name": f"{template}-n{n}-s{seed}",
        "template": template,
        "width": w,
        "height": h,
        "cell_size": CELL,
        "seed": int(seed),
        "obstacles": [list(c) for c in sorted(obstacles, key=lambda c: (c[1], c[0]))],
        "robot": {"x": start[0], "y": start[1], "heading": float(rng.integers(4)) * math.pi / 2},
        "objects": objects,
        "receptacles": receptacles,
        "events": events,
        "outcome": {"p_knock": TEMPLATES[template]["p_knock"]},
        "instructions": [task.to_dict()],
    }
    world = world_from_dict(data, data["name"])
    expert_subgoal_lengths(world, task)
    occ = ground_truth_occupancy(world)
    sc = world.robot_cell()
    for ent in objects + receptacles:
        if astar(occ, sc, to_cell(ent["x"], ent["y"], CELL)) is None:
            raise Unreachable(ent["id"])
    return data


def generate_suite(n_episodes: int, n_subgoals: int, base_seed: int = 0, templates=("office", "studio", "three_room"),
                   dynamic: bool = True, prefixes: bool = False) -> list[dict]:
    return [generate_scenario(templates[k % len(templates)], n_subgoals, base_seed + k, dynamic, prefixes=prefixes)
            for k in range(n_episodes)]


# -- scripted mechanism scenes ------------------------------------------------


def _corridor(length_m: float, width_m: float):
    w, h = round(length_m / CELL) + 1, round(width_m / CELL) + 1
    return w, h


def en_route_scenario(seed: int, appear_tick: int = 23) -> dict:
    """A watched object pops up ahead of the robot while it is walking a corridor."""
    rng = _seed_rng("en_route", seed)
    length = float(rng.uniform(9.0, 11.0))
    w, h = _corridor(length, 1.5)
    sx = float(rng.integers(1, 3)) * CELL
    ay = float(rng.integers(1, h - 1)) * CELL
    ax = round((sx + 2.5 + float(rng.uniform(0.0, 0.5))) / CELL) * CELL
    task = TaskInstruction.from_pairs([("apple", "table")])
    return {
        "name": f"en_route-s{seed}",
        "width": w, "height": h, "cell_size": CELL, "seed": int(seed),
        "obstacles": [],
        "robot": {"x": sx, "y": round(h / 2) * CELL, "heading": 0.0},
        "objects": [{"id": "dis0", "category": "shoe", "x": (w - 3) * CELL, "y": CELL, "z": 0.2}],
        "receptacles": [{"id": "rec0", "category": "table", "x": (w - 2) * CELL, "y": (h - 2) * CELL}],
        "events": [{"trigger": {"type": "at_tick", "tick": appear_tick},
                    "effect": {"type": "add_object", "spec": {"id": "obj0", "category": "apple", "x": ax, "y": ay, "z": 0.5}}}],
        "instructions": [task.to_dict()],
    }


def displaced_grasp_scenario(seed: int) -> dict:
    """The target slides a little the moment the grasp begins; blind closures knock it over."""
    rng = _seed_rng("displaced", seed)
    w, h = 17, 17
    sx, sy = 8 * CELL, 8 * CELL
    ang = float(rng.uniform(-math.pi, math.pi))
    ox = round((sx + 1.25 * math.cos(ang)) / CELL) * CELL
    oy = round((sy + 1.25 * math.sin(ang)) / CELL) * CELL
    mag = float(rng.uniform(0.1, 0.2))
    sang = float(rng.uniform(-math.pi, math.pi))
    rang = ang + math.pi * float(rng.uniform(0.5, 1.5))
    rx = round((sx + 1.5 * math.cos(rang)) / CELL) * CELL
    ry = round((sy + 1.5 * math.sin(rang)) / CELL) * CELL
    task = TaskInstruction.from_pairs([("apple", "box")])
    return {
        "name": f"displaced-s{seed}",
        "width": w, "height": h, "cell_size": CELL, "seed": int(seed),
        "obstacles": [],
        "robot": {"x": sx, "y": sy, "heading": 0.0},
        "objects": [{"id": "obj0", "category": "apple", "x": ox, "y": oy, "z": 0.4}],
        "receptacles": [{"id": "rec0", "category": "box", "x": rx, "y": ry, "surface_height": 0.5}],
        "events": [{"trigger": {"type": "phase_entered", "phase": "grasp", "target": "obj0"},
                    "effect": {"type": "move_object", "target": "obj0",
                               "x": round(ox + mag * math.cos(sang), 4), "y": round(oy + mag * math.sin(sang), 4)}}],
        "outcome": {"p_knock": 1.0},
        "instructions": [task.to_dict()],
    }


def static_visible_scenario(seed: int, n_subgoals: int = 2) -> dict:
    """Small open room, everything in sensor range from the start, no events."""
    rng = _seed_rng("static", seed)
    w = h = 17
    start = (8 * CELL, 8 * CELL)
    cells = [(i, j) for j in range(1, h - 1) for i in range(1, w - 1)
             if 0.75 <= math.hypot(i * CELL - start[0], j * CELL - start[1]) <= 1.9]
    objs = _distinct(rng, OBJECT_POOL, n_subgoals)
    recs = _distinct(rng, RECEPTACLE_POOL, n_subgoals)
    taken = [start]
    objects, receptacles = [], []
    for k, cat in enumerate(objs):
        p = _pick(rng, cells, taken, 0.75)
        taken.append(p)
        objects.append({"id": f"obj{k}", "category": cat, "x": p[0], "y": p[1], "z": 0.5})
    for k, cat in enumerate(recs):
        p = _pick(rng, cells, taken, 0.75)
        taken.append(p)
        receptacles.append({"id": f"rec{k}", "category": cat, "x": p[0], "y": p[1]})
    task = TaskInstruction.from_pairs(list(zip(objs, recs)))
    return {
        "name": f"static-s{seed}",
        "width": w, "height": h, "cell_size": CELL, "seed": int(seed),
        "obstacles": [],
        "robot": {"x": start[0], "y": start[1], "heading": 0.0},
        "objects": objects, "receptacles": receptacles, "events": [],
        "instructions": [task.to_dict()],
    }


def tabletop_scenario(seed: int, p_displace: float = 0.6) -> dict:
    """Short pick-and-place next to a table; sometimes the item slides as the gripper closes in."""
    rng = _seed_rng("tabletop", seed)
    data = generate_scenario("tabletop", 1, seed, dynamic=False, n_distractors=2)
    data["name"] = f"tabletop-s{seed}"
    o = data["objects"][0]
    free = set(_open_cells(data["width"], data["height"], {tuple(c) for c in data["obstacles"]}, margin=0))
    if rng.random() < p_displace:
        for _ in range(50):
            mag = float(rng.uniform(0.08, 0.2))
            ang = float(rng.uniform(-math.pi, math.pi))
            if to_cell(o["x"] + mag * math.cos(ang), o["y"] + mag * math.sin(ang), CELL) in free:
                break
        data["events"] = [{"trigger": {"type": "phase_entered", "phase": "grasp", "target": o["id"]},
                           "effect": {"type": "move_object", "target": o["id"],
                                      "x": round(o["x"] + mag * math.cos(ang), 4),
                                      "y": round(o["y"] + mag * math.sin(ang), 4)}}]
    data["outcome"] = {"p_knock": 0.5}
    return data
