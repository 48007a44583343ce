"""Deliberative planner: picks the next (action, target, guidance) at decision points."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Protocol

from .config import DEFAULT_CONFIG, SimConfig
from .exploration import (
    Frontier,
    FrontierView,
    best_frontier,
    bfs_distances,
    extract_frontiers,
    score_frontiers,
    select_topk_diverse,
    similarity,
)
from .geometry import Cell, cell_center, to_cell
from .memory import AgentMemory, RegistryRecord

ACTIONS = ("go_to", "explore", "grasp", "place")
PENDING, HELD, DONE, FAILED = "pending", "held", "done", "failed"


class TaskComplete(Exception):
    pass


class NoFrontier(Exception):
    def __init__(self, subgoal: int, holding: bool):
        super().__init__(f"no reachable frontier for subgoal {subgoal}")
        self.subgoal = subgoal
        self.holding = holding


@dataclass(frozen=True)
class Subgoal:
    object_query: str
    receptacle_query: str


@dataclass(frozen=True)
class TaskInstruction:
    subgoals: tuple[Subgoal, ...]
    text: str = ""

    @classmethod
    def from_pairs(cls, pairs, text: str = "") -> "TaskInstruction":
        subs = tuple(Subgoal(o, r) for o, r in pairs)
        return cls(subs, text or describe(subs))

    def to_dict(self) -> dict:
        return {"text": self.text, "subgoals": [[s.object_query, s.receptacle_query] for s in self.subgoals]}

    @classmethod
    def from_dict(cls, data: dict) -> "TaskInstruction":
        return cls.from_pairs(data["subgoals"], data.get("text", ""))


_CLAUSE = re.compile(
    r"(?:put|place|move|bring|take|drop|set)\s+(?:the\s+|a\s+|an\s+)?(?P<obj>[a-z ]+?)\s+"
    r"(?:on top of|onto|on|into|inside|in|to)\s+(?:the\s+|a\s+|an\s+)?(?P<rec>[a-z ]+)$"
)


def parse_instruction(text: str) -> TaskInstruction:
    """Parse "put the X on the Y, then the Z in the W" style commands."""
    clauses = re.split(r"\s*(?:,|;|\bthen\b|\band\b|\.)\s*", text.lower())
    pairs = []
    verb = "put"
    for clause in clauses:
        clause = " ".join(clause.split())
        if not clause:
            continue
        m = _CLAUSE.match(clause)
        if m is None:
            m = _CLAUSE.match(f"{verb} {clause}")
        else:
            verb = clause.split()[0]
        if m is None:
            raise ValueError(f"cannot parse instruction clause {clause!r}")
        pairs.append((m["obj"].strip(), m["rec"].strip()))
    if not pairs:
        raise ValueError("empty instruction")
    return TaskInstruction.from_pairs(pairs, text)


def describe(subgoals) -> str:
    parts = [f"the {s.object_query} on the {s.receptacle_query}" for s in subgoals]
    return "Put " + ", then ".join(parts) + "."


@dataclass(frozen=True)
class GuidancePrompt:
    phase: str  # explore | navigate | grasp | place
    watch_entities: tuple[str, ...]
    anomaly_checks: frozenset
    # (entity, record id, (x, y)) for watched things the planner already believes in
    expected: tuple = ()
    # entities whose first sighting is worth interrupting for
    replan_entities: frozenset = frozenset()
    generic: bool = False


@dataclass
class PlanDecision:
    action: str
    target: object  # Cell for go_to/explore, registry record id for grasp/place
    guidance: GuidancePrompt
    subgoal: int | None = None
    record_id: str | None = None
    # go_to target is only the closest reachable cell, not a proper approach
    partial: bool = False


@dataclass
class TaskProgress:
    task: TaskInstruction
    status: list[str] = field(default_factory=list)
    held: int | None = None
    unreachable: set = field(default_factory=set)

    def __post_init__(self):
        if not self.status:
            self.status = [PENDING] * len(self.task.subgoals)

    def pending(self) -> list[int]:
        return [j for j, s in enumerate(self.status) if s == PENDING]

    def finished(self) -> bool:
        return all(s in (DONE, FAILED) for s in self.status)


@dataclass
class RobotView:
    x: float
    y: float
    heading: float


class FrontierScorer(Protocol):
    def __call__(self, views: list[FrontierView], frontiers: list[Frontier], watch: tuple[str, ...]) -> int | None:
        ...


def rule_frontier_scores(views: list[FrontierView], watch, free_weight: float) -> list[float]:
    scores = []
    for v in views:
        sem = 0.0
        for cat in v.categories:
            for e in watch:
                sem = max(sem, similarity(cat, e))
        scores.append(sem + free_weight * v.free_fraction)
    return scores


def select_frontier(frontiers: list[Frontier], views: list[FrontierView], watch, free_weight: float = 0.1,
                    scorer: FrontierScorer | None = None) -> Frontier:
    """Pick among the diverse candidates from their rendered views."""
    if not frontiers:
        raise ValueError("no candidates")
    if scorer is not None:
        idx = scorer(views, frontiers, tuple(watch))
        if idx is not None and 0 <= idx < len(frontiers):
            return frontiers[idx]
    scores = rule_frontier_scores(views, watch, free_weight)
    order = sorted(range(len(frontiers)),
                   key=lambda n: (-scores[n], -frontiers[n].value, frontiers[n].cell[1], frontiers[n].cell[0]))
    return frontiers[order[0]]


def _dist(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


class Planner:
    """Deliberative (``deliberative=True``) or strictly sequential planner.

    The deliberative planner may reorder subgoals when a later object turns
    out to be much closer, and picks exploration targets by looking at a few
    diverse candidate views. The sequential planner works through subgoals in
    order and always heads for the single best-valued frontier.
    """

    def __init__(self, cfg: SimConfig = DEFAULT_CONFIG, grasp_range: float = 0.6, place_range: float = 0.6,
                 deliberative: bool = True, scorer: FrontierScorer | None = None):
        self.cfg = cfg
        self.grasp_range = grasp_range
        self.place_range = place_range
        self.deliberative = deliberative
        self.scorer = scorer

    # -- registry queries ---------------------------------------------------

    def matches(self, rec: RegistryRecord, query: str) -> bool:
        return similarity(rec.category, query) >= self.cfg.theta_match

    def known(self, memory: AgentMemory, query: str, kind: str, progress: TaskProgress) -> list[RegistryRecord]:
        return [r for r in memory.registry.live()
                if r.kind == kind and r.id not in progress.unreachable and self.matches(r, query)]

    def nearest_known(self, memory, query, kind, progress, robot) -> RegistryRecord | None:
        recs = self.known(memory, query, kind, progress)
        if not recs:
            return None
        return min(recs, key=lambda r: (_dist(r.position, (robot.x, robot.y)), r.id))

    # -- guidance -------------------------------------------------------------

    def guidance(self, phase: str, task: TaskInstruction, memory: AgentMemory, progress: TaskProgress,
                 focus: int | None) -> GuidancePrompt:
        subs = task.subgoals
        pending_objs = [subs[j].object_query for j in progress.pending()]
        pending_recs = [subs[j].receptacle_query for j in progress.pending()]
        held_rec = [subs[progress.held].receptacle_query] if progress.held is not None else []
        unresolved = [q for q in pending_objs if not self.known(memory, q, "object", progress)]
        unresolved += [q for q in held_rec + pending_recs if not self.known(memory, q, "receptacle", progress)]

        if phase == "explore":
            watch = unresolved or pending_objs + held_rec
            checks = {"target_shift"}
        elif phase == "grasp":
            watch = [subs[focus].object_query]
            checks = {"alignment"}
        elif phase == "place":
            watch = [subs[focus].receptacle_query]
            checks = {"stability", "availability"}
        elif progress.held is not None:
            watch = held_rec + pending_objs
            checks = {"target_shift", "availability"}
        else:
            watch = [subs[focus].object_query, subs[focus].receptacle_query] + unresolved
            checks = {"target_shift"}
        watch = tuple(dict.fromkeys(watch))

        expected = []
        for e in watch:
            for r in memory.registry.live():
                if self.matches(r, e):
                    expected.append((e, r.id, (r.position[0], r.position[1])))
        replan = {q for q in pending_objs if not self.known(memory, q, "object", progress)}
        replan |= {q for q in held_rec if not self.known(memory, q, "receptacle", progress)}
        return GuidancePrompt(phase, watch, frozenset(checks), tuple(expected), frozenset(replan & set(watch)))

    # -- planning -------------------------------------------------------------

    def approach(self, memory: AgentMemory, dist_map: dict[Cell, int], pos, reach: float):
        cs = memory.cell_size
        tc = to_cell(pos[0], pos[1], cs)
        span = int(math.ceil(reach / cs)) + 1
        near = []
        for dy in range(-span, span + 1):
            for dx in range(-span, span + 1):
                c = (tc[0] + dx, tc[1] + dy)
                if c in dist_map and _dist(cell_center(c, cs), pos) <= reach + 1e-9:
                    near.append(c)
        if near:
            return min(near, key=lambda c: (dist_map[c], c[1], c[0])), False
        if not dist_map:
            return None, True
        best = min(dist_map, key=lambda c: (_dist(cell_center(c, cs), pos), dist_map[c], c[1], c[0]))
        return best, True

    def _goto_or_act(self, act: str, rec: RegistryRecord, j: int, phase_nav: GuidancePrompt,
                     phase_act: GuidancePrompt, memory, progress, robot, dist_map, reach) -> PlanDecision | None:
        if _dist(rec.position, (robot.x, robot.y)) <= reach:
            return PlanDecision(act, rec.id, phase_act, j, rec.id)
        cell, partial = self.approach(memory, dist_map, rec.position, self.cfg.approach_dist)
        here = to_cell(robot.x, robot.y, memory.cell_size)
        if cell is None or cell == here:
            progress.unreachable.add(rec.id)
            return None
        return PlanDecision("go_to", cell, phase_nav, j, rec.id, partial)

    def plan(self, task: TaskInstruction, memory: AgentMemory, progress: TaskProgress, robot: RobotView,
             view_fn: Callable[[Frontier], FrontierView] | None = None) -> PlanDecision:
        while True:
            decision = self._plan_once(task, memory, progress, robot, view_fn)
            if decision is not None:
                return decision

    def _plan_once(self, task, memory, progress, robot, view_fn) -> PlanDecision | None:
        if progress.finished():
            raise TaskComplete()
        here = to_cell(robot.x, robot.y, memory.cell_size)
        dist_map = bfs_distances(memory.occupancy, here)
        subs = task.subgoals

        if progress.held is not None:
            j = progress.held
            rec = self.nearest_known(memory, subs[j].receptacle_query, "receptacle", progress, robot)
            if rec is not None:
                return self._goto_or_act(
                    "place", rec, j, self.guidance("navigate", task, memory, progress, j),
                    self.guidance("place", task, memory, progress, j), memory, progress, robot, dist_map,
                    self.place_range)
            return self._explore(task, memory, progress, robot, view_fn, dist_map, j, [subs[j].receptacle_query])

        pending = progress.pending()
        if not pending:
            raise TaskComplete()
        j = pending[0]
        rec = self.nearest_known(memory, subs[j].object_query, "object", progress, robot)
        if self.deliberative:
            here_xy = (robot.x, robot.y)
            cur_d = _dist(rec.position, here_xy) if rec is not None else math.inf
            best = None
            for k in pending[1:]:
                other = self.nearest_known(memory, subs[k].object_query, "object", progress, robot)
                if other is None:
                    continue
                d = _dist(other.position, here_xy)
                if d < 0.5 * cur_d and (best is None or d < best[0]):
                    best = (d, k, other)
            if best is not None:
                _, j, rec = best
        if rec is not None:
            return self._goto_or_act(
                "grasp", rec, j, self.guidance("navigate", task, memory, progress, j),
                self.guidance("grasp", task, memory, progress, j), memory, progress, robot, dist_map,
                self.grasp_range)
        queries = [subs[k].object_query for k in pending] if self.deliberative else [subs[j].object_query]
        return self._explore(task, memory, progress, robot, view_fn, dist_map, j, queries)

    def _explore(self, task, memory, progress, robot, view_fn, dist_map, j, queries) -> PlanDecision:
        cfg = self.cfg
        here = to_cell(robot.x, robot.y, memory.cell_size)
        frontiers = [f for f in extract_frontiers(memory.occupancy) if f.cell in dist_map and f.cell != here]
        if not frontiers:
            raise NoFrontier(j, progress.held is not None)
        steps = cfg.explore_horizon / memory.cell_size
        local = [f for f in frontiers if dist_map[f.cell] <= steps]
        frontiers = local or frontiers
        score_frontiers(memory, frontiers, queries, memory.tick, cfg.tau, cfg.semantic_radius)
        guidance = self.guidance("explore", task, memory, progress, j)
        if self.deliberative:
            cands = select_topk_diverse(frontiers, cfg.top_k, cfg.d_min, memory.cell_size)
            if view_fn is not None and len(cands) > 1:
                views = [view_fn(f) for f in cands]
                choice = select_frontier(cands, views, guidance.watch_entities, cfg.free_area_weight, self.scorer)
            else:
                choice = cands[0]
        else:
            choice = best_frontier(frontiers)
        return PlanDecision("explore", choice.cell, guidance, j)

    def replan_on_report(self, task, memory, progress, robot, parse_result, look_around: Callable[[], None],
                         view_fn=None) -> PlanDecision:
        """Refresh memory with a look-around, record why, then plan from scratch."""
        if parse_result.mode != "REPLAN":
            raise ValueError("replan_on_report needs a REPLAN parse result")
        look_around()
        memory.history.append(memory.tick, "replan", parse_result.cause, "triggered")
        return self.plan(task, memory, progress, robot, view_fn)
