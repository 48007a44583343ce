"""Success and path-efficiency metrics, expert paths, aggregation."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .exploration import astar, similarity
from .geometry import to_cell
from .memory import FREE, OCCUPIED, OccupancyGrid


class Unreachable(ValueError):
    pass


@dataclass
class SubgoalOutcome:
    success: bool
    agent_path_len: float
    expert_path_len: float
    failure_class: str | None = None


@dataclass
class EpisodeResult:
    subgoal_outcomes: list[SubgoalOutcome]
    total_path_len: float
    total_ticks: int
    failure_class: str | None = None
    variant: str = ""
    scenario: str = ""
    seed: int = 0
    counts: dict = field(default_factory=dict)

    @property
    def success(self) -> bool:
        return bool(self.subgoal_outcomes) and all(o.success for o in self.subgoal_outcomes)

    @property
    def expert_path_len(self) -> float:
        return sum(o.expert_path_len for o in self.subgoal_outcomes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["success"] = self.success
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeResult":
        d = dict(d)
        d.pop("success", None)
        d["subgoal_outcomes"] = [SubgoalOutcome(**o) for o in d["subgoal_outcomes"]]
        return cls(**d)


def compute_spl(success: bool, agent_len: float, expert_len: float) -> float:
    if expert_len <= 0:
        raise ValueError("expert path length must be positive")
    if not success:
        return 0.0
    return expert_len / max(agent_len, expert_len)


def compute_pspl(outcomes: list[SubgoalOutcome]) -> float:
    if not outcomes:
        raise ValueError("no subgoals")
    return sum(compute_spl(o.success, o.agent_path_len, o.expert_path_len) for o in outcomes) / len(outcomes)


@dataclass
class MetricsSummary:
    n: int
    sr: float
    psr: float
    spl: float
    pspl: float
    avg_ticks: float  # over successful episodes, NaN when none succeeded
    avg_path_len: float
    failures: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}


def aggregate(results: list[EpisodeResult]) -> MetricsSummary:
    if not results:
        raise ValueError("no results to aggregate")
    sr = np.mean([r.success for r in results])
    psr = np.mean([sum(o.success for o in r.subgoal_outcomes) / len(r.subgoal_outcomes) for r in results])
    spl = np.mean([compute_spl(r.success, r.total_path_len, r.expert_path_len) for r in results])
    pspl = np.mean([compute_pspl(r.subgoal_outcomes) for r in results])
    wins = [r for r in results if r.success]
    ticks = float(np.mean([r.total_ticks for r in wins])) if wins else math.nan
    plen = float(np.mean([r.total_path_len for r in wins])) if wins else math.nan
    fails = Counter(r.failure_class for r in results if r.failure_class)
    return MetricsSummary(len(results), float(sr), float(psr), float(spl), float(pspl), ticks, plen,
                          dict(sorted(fails.items())))


def final_positions(world) -> dict[str, tuple[float, float]]:
    """Where every entity ends up once all scripted moves have happened."""
    pos = {o.id: (o.x, o.y) for o in world.objects.values()}
    pos.update({r.id: (r.x, r.y) for r in world.receptacles.values()})
    for ev in world.events:
        eff = ev.effect
        if eff.type in ("move_object", "move_receptacle"):
            pos[eff.target] = (eff.x, eff.y)
        elif eff.type == "add_object" and eff.spec:
            pos.setdefault(eff.spec["id"], (eff.spec["x"], eff.spec["y"]))
    return pos


def _categories(world) -> dict[str, tuple[str, str]]:
    cats = {o.id: ("object", o.category) for o in world.objects.values()}
    cats.update({r.id: ("receptacle", r.category) for r in world.receptacles.values()})
    for ev in world.events:
        if ev.effect.type == "add_object" and ev.effect.spec:
            cats.setdefault(ev.effect.spec["id"], ("object", ev.effect.spec["category"]))
    return cats


def resolve_entity(world, query: str, kind: str) -> str:
    cats = _categories(world)
    scored = [(-similarity(cat, query), eid) for eid, (k, cat) in cats.items() if k == kind]
    if not scored:
        raise Unreachable(f"no {kind} in scene")
    return min(scored)[1]


def ground_truth_occupancy(world):
    grid = np.full((world.height, world.width), FREE, dtype=np.int8)
    for i, j in world.obstacles:
        if 0 <= i < world.width and 0 <= j < world.height:
            grid[j, i] = OCCUPIED
    return OccupancyGrid(grid)


def expert_subgoal_lengths(world, task) -> list[float]:
    """Shortest ground-truth path per subgoal: previous drop-off -> object -> receptacle."""
    occ = ground_truth_occupancy(world)
    cs = world.cell_size
    pos = final_positions(world)
    cur = to_cell(world.robot.x, world.robot.y, cs)
    out = []
    for s in task.subgoals:
        total = 0.0
        for query, kind in ((s.object_query, "object"), (s.receptacle_query, "receptacle")):
            eid = resolve_entity(world, query, kind)
            goal = to_cell(*pos[eid], cs)
            path = astar(occ, cur, goal)
            if path is None:
                raise Unreachable(f"{eid} unreachable from {cur}")
            total += (len(path) - 1) * cs
            cur = goal
        out.append(max(total, cs))
    return out
