"""Deterministic dynamic grid world.

The world is the simulator's ground truth. Agents only see it through
:func:`sense` and the manipulation primitives; the ``object_id`` carried by a
:class:`Detection` is for the executor's primitive calls and test oracles,
never for planning decisions.

Randomness is counter-based: every draw derives its own generator from the
scenario seed plus a key (tick, object, attempt number ...), so adding an
extra sensing call never shifts any later grasp draw.
"""

from __future__ import annotations

import copy
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .geometry import Cell, cell_center, line_blocked, to_cell, wrap_angle


class WorldError(Exception):
    pass


class BlockedCell(WorldError):
    pass


class OutOfRange(WorldError):
    pass


class AlreadyHolding(WorldError):
    pass


class ObjectMissing(WorldError):
    pass


class ReceptacleUnavailable(WorldError):
    pass


class NotHolding(WorldError):
    pass


class InvalidScenario(ValueError):
    pass


FREE, HELD, PLACED, REMOVED = "free", "held", "placed", "removed"
OBJECT_RADIUS = 0.05


def keyed_rng(seed: int, *parts) -> np.random.Generator:
    keys = [int(seed) & 0xFFFFFFFF]
    for p in parts:
        if isinstance(p, (int, np.integer)):
            keys.append(int(p) & 0xFFFFFFFF)
        else:
            keys.append(zlib.crc32(repr(p).encode()))
    return np.random.default_rng(np.random.SeedSequence(keys))


@dataclass
class WorldObject:
    id: str
    category: str
    x: float
    y: float
    z: float = 0.0
    status: str = FREE
    receptacle_id: str | None = None
    moved: bool = False


@dataclass
class Receptacle:
    id: str
    category: str
    x: float
    y: float
    surface_height: float = 0.7
    available: bool = True
    moved: bool = False


@dataclass
class RobotState:
    x: float
    y: float
    heading: float = 0.0
    holding: str | None = None
    odometry: float = 0.0


@dataclass
class Trigger:
    type: str  # at_tick | robot_within | phase_entered
    tick: int | None = None
    radius: float | None = None
    target: str | None = None
    phase: str | None = None


@dataclass
class Effect:
    type: str  # move_object | move_receptacle | add_object | remove_object | disable_receptacle
    target: str | None = None
    x: float | None = None
    y: float | None = None
    spec: dict | None = None


@dataclass
class ScenarioEvent:
    trigger: Trigger
    effect: Effect
    fired: bool = False
    fired_tick: int | None = None


@dataclass
class OutcomeModel:
    align_tol: float = 0.05
    p_grasp: float = 0.9
    grasp_range: float = 0.6
    place_range: float = 0.6
    # chance that a misaligned closure knocks the object out of reach
    p_knock: float = 0.0


@dataclass
class SensorModel:
    range_noise_sigma: float = 0.02
    outlier_prob: float = 0.0
    samples_per_detection: int = 9


@dataclass
class Detection:
    object_id: str
    kind: str  # object | receptacle
    category: str
    bearing_span: tuple[float, float]
    range_samples: list[tuple[float, float, float]]
    available: bool = True

    @property
    def bearing(self) -> float:
        return 0.5 * (self.bearing_span[0] + self.bearing_span[1])


@dataclass
class Observation:
    tick: int
    pose: tuple[float, float, float]
    detections: list[Detection]
    # wrist-camera offset between the commanded grasp point and the perceived
    # object; filled in by the executor while a grasp is in progress
    alignment_error: float | None = None
    # cell -> is_obstacle for the view; only look-around frames carry it
    cells: dict[Cell, bool] | None = None
    # record id -> whether its expected spot is inside the unobstructed view
    expected_in_view: dict[str, bool] = field(default_factory=dict)


@dataclass
class GraspOutcome:
    success: bool
    reason: str | None = None


@dataclass
class WorldState:
    width: int
    height: int
    cell_size: float
    obstacles: frozenset
    objects: dict[str, WorldObject]
    receptacles: dict[str, Receptacle]
    robot: RobotState
    events: list[ScenarioEvent] = field(default_factory=list)
    rng_seed: int = 0
    tick: int = 0
    outcome: OutcomeModel = field(default_factory=OutcomeModel)
    sensor: SensorModel = field(default_factory=SensorModel)
    phase: tuple[str, str | None] | None = None
    fired_log: list[dict] = field(default_factory=list)
    grasp_attempts: dict[str, int] = field(default_factory=dict)
    # obstacles never change, so line-of-sight disks are memoised per viewpoint
    vis_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and cell not in self.obstacles

    def robot_cell(self) -> Cell:
        return to_cell(self.robot.x, self.robot.y, self.cell_size)

    def entity(self, entity_id: str):
        if entity_id in self.objects:
            return self.objects[entity_id]
        return self.receptacles.get(entity_id)

    def snapshot(self) -> "WorldState":
        cache, self.vis_cache = self.vis_cache, {}
        try:
            dup = copy.deepcopy(self)
        finally:
            self.vis_cache = cache
        dup.vis_cache = cache
        return dup

    def live_objects(self) -> int:
        return sum(1 for o in self.objects.values() if o.status != REMOVED)


def _dist(ax, ay, bx, by) -> float:
    return math.hypot(ax - bx, ay - by)


# -- sensing -----------------------------------------------------------------


def can_see(world: WorldState, pose, point, fov_deg: float, max_range: float) -> bool:
    x, y, heading = pose
    r = _dist(x, y, point[0], point[1])
    if r > max_range:
        return False
    if r > 1e-9:
        bearing = wrap_angle(math.atan2(point[1] - y, point[0] - x) - heading)
        if abs(bearing) > math.radians(fov_deg) / 2.0 + 1e-12:
            return False
    return not line_blocked((x, y), point, world.obstacles, world.cell_size)


def _detect(world: WorldState, pose, ent, kind: str) -> Detection:
    x, y, heading = pose
    z = getattr(ent, "z", getattr(ent, "surface_height", 0.0))
    horiz = _dist(x, y, ent.x, ent.y)
    bearing = wrap_angle(math.atan2(ent.y - y, ent.x - x) - heading)
    elevation = math.atan2(z, horiz)
    true_range = math.hypot(horiz, z)
    half = math.atan2(OBJECT_RADIUS, max(horiz, OBJECT_RADIUS))
    sm = world.sensor
    rng = keyed_rng(world.rng_seed, "sense", world.tick, ent.id, round(x, 6), round(y, 6), round(heading, 6))
    noise = rng.normal(0.0, sm.range_noise_sigma, sm.samples_per_detection)
    outlier = rng.random(sm.samples_per_detection) < sm.outlier_prob
    background = rng.uniform(0.3, 1.5, sm.samples_per_detection)
    samples = []
    for k in range(sm.samples_per_detection):
        d = true_range + float(noise[k])
        if outlier[k]:
            d += float(background[k])
        samples.append((bearing, elevation, max(d, 0.0)))
    return Detection(
        object_id=ent.id,
        kind=kind,
        category=ent.category,
        bearing_span=(bearing - half, bearing + half),
        range_samples=samples,
        available=getattr(ent, "available", True),
    )


def sense(world: WorldState, fov_deg: float, max_range: float, heading: float | None = None) -> Observation:
    """Synthetic RGB-D frame from the robot pose (optionally re-oriented)."""
    if not (0.0 < fov_deg <= 360.0) or max_range <= 0.0:
        raise ValueError("fov_deg must be in (0, 360] and max_range > 0")
    r = world.robot
    pose = (r.x, r.y, r.heading if heading is None else heading)
    detections = []
    for obj in world.objects.values():
        if obj.status in (FREE, PLACED) and can_see(world, pose, (obj.x, obj.y), fov_deg, max_range):
            detections.append(_detect(world, pose, obj, "object"))
    for rec in world.receptacles.values():
        if can_see(world, pose, (rec.x, rec.y), fov_deg, max_range):
            detections.append(_detect(world, pose, rec, "receptacle"))
    return Observation(tick=world.tick, pose=pose, detections=detections)


def _disk(world: WorldState, x: float, y: float, max_range: float) -> list:
    """(cell, bearing, range, is_obstacle, line_clear) for cell centres within range."""
    key = (round(x, 9), round(y, 9), max_range)
    hit = world.vis_cache.get(key)
    if hit is not None:
        return hit
    cs = world.cell_size
    rc = to_cell(x, y, cs)
    reach = int(math.ceil(max_range / cs))
    out = []
    for j in range(max(0, rc[1] - reach), min(world.height, rc[1] + reach + 1)):
        for i in range(max(0, rc[0] - reach), min(world.width, rc[0] + reach + 1)):
            cx, cy = cell_center((i, j), cs)
            r = _dist(x, y, cx, cy)
            if r > max_range:
                continue
            clear = not line_blocked((x, y), (cx, cy), world.obstacles, cs)
            out.append(((i, j), math.atan2(cy - y, cx - x), r, (i, j) in world.obstacles, clear))
    world.vis_cache[key] = out
    return out


def _in_cone(bearing: float, r: float, heading: float, half: float) -> bool:
    return r < 1e-9 or abs(wrap_angle(bearing - heading)) <= half + 1e-12


def visible_cells(world: WorldState, pose, fov_deg: float, max_range: float) -> dict[Cell, bool]:
    """Cells whose centre is in view, mapped to ``True`` when the cell is an obstacle."""
    x, y, heading = pose
    half = math.radians(fov_deg) / 2.0
    return {c: obst for c, b, r, obst, clear in _disk(world, x, y, max_range) if clear and _in_cone(b, r, heading, half)}


def free_area_fraction(world: WorldState, pose, fov_deg: float, max_range: float) -> float:
    """Visible free cells over all in-bounds cells inside the view cone."""
    x, y, heading = pose
    half = math.radians(fov_deg) / 2.0
    total = seen = 0
    for c, b, r, obst, clear in _disk(world, x, y, max_range):
        if r < 1e-9 or not _in_cone(b, r, heading, half):
            continue
        total += 1
        if clear and not obst:
            seen += 1
    return seen / total if total else 0.0


# -- time and events -------------------------------------------------------------


def _trigger_due(world: WorldState, trig: Trigger) -> bool:
    if trig.type == "at_tick":
        return world.tick >= trig.tick
    if trig.type == "robot_within":
        ent = world.entity(trig.target)
        if ent is None:
            return False
        return _dist(world.robot.x, world.robot.y, ent.x, ent.y) <= trig.radius
    if trig.type == "phase_entered":
        if world.phase is None:
            return False
        phase, target = world.phase
        return phase == trig.phase and (trig.target is None or trig.target == target)
    raise InvalidScenario(f"unknown trigger type {trig.type!r}")


def _apply_effect(world: WorldState, eff: Effect) -> None:
    t = eff.type
    if t == "move_object":
        obj = world.objects[eff.target]
        if obj.status in (FREE, PLACED):
            obj.x, obj.y = eff.x, eff.y
            obj.status, obj.receptacle_id, obj.moved = FREE, None, True
    elif t == "move_receptacle":
        rec = world.receptacles[eff.target]
        rec.x, rec.y, rec.moved = eff.x, eff.y, True
    elif t == "add_object":
        spec = eff.spec
        world.objects[spec["id"]] = WorldObject(
            id=spec["id"], category=spec["category"], x=spec["x"], y=spec["y"], z=spec.get("z", 0.0)
        )
    elif t == "remove_object":
        obj = world.objects[eff.target]
        if obj.status != HELD:
            obj.status = REMOVED
    elif t == "disable_receptacle":
        world.receptacles[eff.target].available = False
    else:
        raise InvalidScenario(f"unknown effect type {t!r}")


def fire_due_events(world: WorldState) -> list[int]:
    """Apply every not-yet-fired event whose trigger holds, in file order."""
    fired = []
    for idx, ev in enumerate(world.events):
        if ev.fired or not _trigger_due(world, ev.trigger):
            continue
        _apply_effect(world, ev.effect)
        ev.fired, ev.fired_tick = True, world.tick
        fired.append(idx)
        world.fired_log.append({"tick": world.tick, "event": idx, "effect": ev.effect.type, "target": ev.effect.target})
    return fired


def advance(world: WorldState, ticks: int = 1) -> WorldState:
    """Let time pass with the robot stationary."""
    for _ in range(ticks):
        world.tick += 1
        fire_due_events(world)
    return world


def enter_phase(world: WorldState, phase: str, target: str | None = None) -> list[int]:
    world.phase = (phase, target)
    return fire_due_events(world)


# -- primitives --------------------------------------------------------------


def step_motion(world: WorldState, target_cell: Cell) -> WorldState:
    cur = world.robot_cell()
    if abs(cur[0] - target_cell[0]) + abs(cur[1] - target_cell[1]) != 1:
        raise ValueError(f"{target_cell} is not 4-adjacent to {cur}")
    if not world.is_free(target_cell):
        advance(world)
        raise BlockedCell(f"cell {target_cell} is blocked")
    r = world.robot
    nx, ny = cell_center(target_cell, world.cell_size)
    r.heading = math.atan2(ny - r.y, nx - r.x)
    r.odometry += math.hypot(nx - r.x, ny - r.y)
    r.x, r.y = nx, ny
    advance(world)
    return world


def _grasp_draw(world: WorldState, object_id: str) -> float:
    n = world.grasp_attempts.get(object_id, 0) + 1
    world.grasp_attempts[object_id] = n
    return float(keyed_rng(world.rng_seed, "grasp", object_id, n).random())


def attempt_grasp(world: WorldState, object_id: str, alignment_error: float) -> GraspOutcome:
    obj = world.objects.get(object_id)
    if obj is None or obj.status in (REMOVED, HELD):
        raise ObjectMissing(object_id)
    if world.robot.holding is not None:
        raise AlreadyHolding(world.robot.holding)
    if _dist(world.robot.x, world.robot.y, obj.x, obj.y) > world.outcome.grasp_range:
        if obj.moved:
            raise ObjectMissing(object_id)
        raise OutOfRange(object_id)
    u = _grasp_draw(world, object_id)
    if alignment_error > world.outcome.align_tol:
        if u < world.outcome.p_knock:
            obj.status = REMOVED
            return GraspOutcome(False, "collision")
        return GraspOutcome(False, "misaligned")
    if u < world.outcome.p_grasp:
        obj.status, obj.receptacle_id = HELD, None
        world.robot.holding = object_id
        return GraspOutcome(True)
    return GraspOutcome(False, "failed_grasp")


def attempt_place(world: WorldState, receptacle_id: str) -> GraspOutcome:
    if world.robot.holding is None:
        raise NotHolding()
    rec = world.receptacles.get(receptacle_id)
    if rec is None or not rec.available:
        raise ReceptacleUnavailable(receptacle_id)
    if _dist(world.robot.x, world.robot.y, rec.x, rec.y) > world.outcome.place_range:
        if rec.moved:
            raise ReceptacleUnavailable(receptacle_id)
        raise OutOfRange(receptacle_id)
    obj = world.objects[world.robot.holding]
    obj.status, obj.receptacle_id = PLACED, receptacle_id
    obj.x, obj.y, obj.z = rec.x, rec.y, rec.surface_height
    world.robot.holding = None
    return GraspOutcome(True)


def drop_held(world: WorldState) -> str | None:
    """Set the held object down at the robot's feet (used when a subgoal is abandoned)."""
    oid = world.robot.holding
    if oid is None:
        return None
    obj = world.objects[oid]
    obj.status, obj.x, obj.y, obj.z = FREE, world.robot.x, world.robot.y, 0.0
    world.robot.holding = None
    return oid


# -- scenario files ----------------------------------------------------------


def _cells_from(data: dict) -> set[Cell]:
    cells = {tuple(c) for c in data.get("obstacles", [])}
    for x0, y0, x1, y1 in data.get("obstacle_rects", []):
        for j in range(min(y0, y1), max(y0, y1) + 1):
            for i in range(min(x0, x1), max(x0, x1) + 1):
                cells.add((i, j))
    return cells


def world_from_dict(data: dict, source: str = "<scenario>") -> WorldState:
    try:
        width, height, cs = int(data["width"]), int(data["height"]), float(data["cell_size"])
        obstacles = frozenset(_cells_from(data))
        robot = RobotState(x=float(data["robot"]["x"]), y=float(data["robot"]["y"]),
                           heading=float(data["robot"].get("heading", 0.0)))
        objects = {}
        for o in data.get("objects", []):
            objects[o["id"]] = WorldObject(id=o["id"], category=o["category"], x=float(o["x"]),
                                           y=float(o["y"]), z=float(o.get("z", 0.0)))
        receptacles = {}
        for r in data.get("receptacles", []):
            receptacles[r["id"]] = Receptacle(id=r["id"], category=r["category"], x=float(r["x"]),
                                              y=float(r["y"]), surface_height=float(r.get("surface_height", 0.7)))
        events = []
        for e in data.get("events", []):
            trig = dict(e["trigger"])
            eff = dict(e["effect"])
            events.append(ScenarioEvent(Trigger(type=trig.pop("type"), **trig), Effect(type=eff.pop("type"), **eff)))
        world = WorldState(
            width=width, height=height, cell_size=cs, obstacles=obstacles, objects=objects,
            receptacles=receptacles, robot=robot, events=events, rng_seed=int(data.get("seed", 0)),
            outcome=OutcomeModel(**data.get("outcome", {})), sensor=SensorModel(**data.get("sensor", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidScenario(f"{source}: {exc!r}") from exc
    validate_world(world, source)
    return world


def validate_world(world: WorldState, source: str = "<scenario>") -> None:
    cs = world.cell_size
    if world.width <= 0 or world.height <= 0 or cs <= 0:
        raise InvalidScenario(f"{source}: grid dimensions must be positive")
    if not world.is_free(world.robot_cell()):
        raise InvalidScenario(f"{source}: robot starts outside the grid or on an obstacle")
    for ent in list(world.objects.values()) + list(world.receptacles.values()):
        if not world.is_free(to_cell(ent.x, ent.y, cs)):
            raise InvalidScenario(f"{source}: {ent.id} is out of bounds or on an obstacle")
    ids = set(world.objects) | set(world.receptacles)
    for n, ev in enumerate(world.events):
        eff = ev.effect
        if eff.type in ("move_object", "move_receptacle"):
            if eff.target not in ids:
                raise InvalidScenario(f"{source}: event {n} targets unknown id {eff.target!r}")
            if not world.is_free(to_cell(eff.x, eff.y, cs)):
                raise InvalidScenario(f"{source}: event {n} moves {eff.target} onto a blocked cell")
        elif eff.type == "add_object":
            spec = eff.spec or {}
            if not world.is_free(to_cell(spec.get("x", -1e9), spec.get("y", -1e9), cs)):
                raise InvalidScenario(f"{source}: event {n} adds an object on a blocked cell")
            ids.add(spec.get("id"))
        elif eff.type in ("remove_object", "disable_receptacle") and eff.target not in ids:
            raise InvalidScenario(f"{source}: event {n} targets unknown id {eff.target!r}")
        if ev.trigger.type not in ("at_tick", "robot_within", "phase_entered"):
            raise InvalidScenario(f"{source}: event {n} has unknown trigger {ev.trigger.type!r}")


def load_scenario(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidScenario(f"{path}:{exc.lineno}: {exc.msg}") from exc


def load_world(path: str | Path) -> WorldState:
    return world_from_dict(load_scenario(path), str(path))


def world_to_dict(world: WorldState) -> dict:
    """Inverse of :func:`world_from_dict` for the initial (unfired) state."""
    return {
        "width": world.width,
        "height": world.height,
        "cell_size": world.cell_size,
        "seed": world.rng_seed,
        "obstacles": [list(c) for c in sorted(world.obstacles, key=lambda c: (c[1], c[0]))],
        "robot": {"x": world.robot.x, "y": world.robot.y, "heading": world.robot.heading},
        "objects": [{"id": o.id, "category": o.category, "x": o.x, "y": o.y, "z": o.z} for o in world.objects.values()],
        "receptacles": [
            {"id": r.id, "category": r.category, "x": r.x, "y": r.y, "surface_height": r.surface_height}
            for r in world.receptacles.values()
        ],
        "events": [
            {"trigger": {k: v for k, v in asdict(e.trigger).items() if v is not None},
             "effect": {k: v for k, v in asdict(e.effect).items() if v is not None}}
            for e in world.events
        ],
        "outcome": asdict(world.outcome),
        "sensor": asdict(world.sensor),
    }


def ground_truth_cells(world: WorldState) -> Iterable[Cell]:
    for j in range(world.height):
        for i in range(world.width):
            yield (i, j)
