"""Tick-level episode runner that wires world, memory, planner and monitor together."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .config import DEFAULT_CONFIG, SimConfig
from .drm import (
    DONE,
    FAILED,
    HELD,
    GuidancePrompt,
    NoFrontier,
    PlanDecision,
    Planner,
    RobotView,
    TaskComplete,
    TaskInstruction,
    TaskProgress,
)
from .exploration import Frontier, FrontierView, astar, outward_heading, similarity
from .geometry import cell_center
from .irm import (
    ADJUST,
    CONTINUE,
    REPLAN,
    Clip,
    NoFreshDetection,
    ParseResult,
    local_grasp_recompute,
    monitor,
    parse,
)
from .localization import LocalizationQueue
from .memory import AgentMemory, Sighting, mark_stale, merge_detections, reconstruct
from .metrics import EpisodeResult, SubgoalOutcome, expert_subgoal_lengths
from .world import (
    BlockedCell,
    ObjectMissing,
    OutOfRange,
    ReceptacleUnavailable,
    WorldState,
    advance,
    attempt_grasp,
    attempt_place,
    can_see,
    drop_held,
    enter_phase,
    free_area_fraction,
    sense,
    step_motion,
    visible_cells,
)

VARIANTS = ("binder", "drm_only", "irm_only", "neither", "sparse_update", "waypoint_update")


class EscalationLoop(Exception):
    pass


@dataclass(frozen=True)
class VariantSpec:
    name: str
    deliberative: bool
    monitored: bool
    guided: bool
    # blind variants re-scan at every navigation target and after every manipulation
    rescan_on_arrival: bool
    rescan_after_action: bool
    waypoint_interval: float | None = None


def variant_spec(name: str, cfg: SimConfig = DEFAULT_CONFIG) -> VariantSpec:
    base, _, arg = name.partition(":")
    if base == "binder":
        return VariantSpec(name, True, True, True, False, False)
    if base == "irm_only":
        return VariantSpec(name, False, True, False, False, False)
    if base == "drm_only":
        return VariantSpec(name, True, False, False, True, True)
    if base in ("neither", "sparse_update"):
        return VariantSpec(name, False, False, False, True, True)
    if base == "waypoint_update":
        interval = float(arg) if arg else cfg.waypoint_interval
        if interval <= 0:
            raise ValueError("waypoint interval must be positive")
        return VariantSpec(name, False, False, False, True, True, interval)
    raise ValueError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")


# failure taxonomy: stage -> classes
FAILURE_CLASSES = {
    "navigation": ("collision_stop", "wrong_localization"),
    "manipulation": ("not_detected", "no_grasp_pose", "collision", "failed_grasp", "dropped"),
    "placing": ("misaligned", "unstable"),
}


@dataclass
class _SubgoalState:
    attempts: int = 0
    grasped: bool = False
    failure: str | None = None
    odometry_start: float = 0.0
    path_len: float = 0.0


@dataclass
class Episode:
    world: WorldState
    task: TaskInstruction
    variant: str = "binder"
    cfg: SimConfig = DEFAULT_CONFIG
    scorer: object = None
    monitor_hook: object = None
    scenario: str = ""
    trace: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.spec = variant_spec(self.variant, self.cfg)
        w = self.world
        self.expert = expert_subgoal_lengths(w, self.task)
        self.memory = AgentMemory.empty(w.width, w.height, w.cell_size, self.cfg.merge_radius)
        self.progress = TaskProgress(self.task)
        self.planner = Planner(self.cfg, w.outcome.grasp_range, w.outcome.place_range,
                               deliberative=self.spec.deliberative, scorer=self.scorer)
        if hasattr(self.scorer, "bind"):
            self.scorer.bind(self.memory, self.task.text)
        self.clip = Clip(self.cfg.clip_window)
        self.locq = LocalizationQueue()
        self.subs = [_SubgoalState() for _ in self.task.subgoals]
        self.max_ticks = self.cfg.max_ticks_base + self.cfg.max_ticks_per_subgoal * len(self.task.subgoals)
        self.replans: Counter = Counter()
        self.counts: Counter = Counter()
        self.guidance: GuidancePrompt | None = None
        self.phase = "explore"
        self.action = "start"
        self.terminated: str | None = None
        self.last_scan_odometry = 0.0
        self.pending_replan: ParseResult | None = None
        self.grasp_point = None
        self.manip_target: tuple[str, str] | None = None  # (query, record id) being handled right now
        self.failure_order: list[int] = []

    # -- bookkeeping ----------------------------------------------------------

    def _robot(self) -> RobotView:
        r = self.world.robot
        return RobotView(r.x, r.y, r.heading)

    def _record(self, kind: str, mode: str | None, extra: dict | None = None, detections: int = 0) -> None:
        w = self.world
        rec = {
            "tick": w.tick,
            "kind": kind,
            "action": self.action,
            "phase": self.phase,
            "mode": mode,
            # full precision so a replay can re-add the steps bit for bit
            "pose": [w.robot.x, w.robot.y, w.robot.heading],
            "odometry": w.robot.odometry,
            "holding": w.robot.holding,
            "detections": detections,
        }
        fired = [e for e in w.fired_log if not e.get("logged")]
        if fired:
            for e in fired:
                e["logged"] = True
            rec["events"] = [{k: v for k, v in e.items() if k != "logged"} for e in fired]
        if extra:
            rec.update(extra)
        self.trace.append(rec)
        self.counts[kind] += 1

    def _timed_out(self) -> bool:
        if self.world.tick >= self.max_ticks:
            self.terminated = self.terminated or "timeout"
            return True
        return False

    def _fail(self, j: int, failure: str) -> None:
        if self.progress.status[j] in (DONE, FAILED):
            return
        if self.progress.held == j:
            drop_held(self.world)
            self.progress.held = None
        self.progress.status[j] = FAILED
        self.subs[j].failure = failure
        self.subs[j].path_len = self.world.robot.odometry - self.subs[j].odometry_start
        self.failure_order.append(j)
        self.memory.history.append(self.world.tick, "subgoal_failed", j, failure)

    # -- sensing --------------------------------------------------------------

    def _frontier_view(self, f: Frontier) -> FrontierView:
        cs = self.world.cell_size
        heading = outward_heading(self.memory.occupancy, f.cell, cs)
        x, y = cell_center(f.cell, cs)
        saved = (self.world.robot.x, self.world.robot.y)
        self.world.robot.x, self.world.robot.y = x, y
        try:
            obs = sense(self.world, self.cfg.fov_deg, self.cfg.view_range, heading)
        finally:
            self.world.robot.x, self.world.robot.y = saved
        cats = Counter(d.category for d in obs.detections)
        free = free_area_fraction(self.world, (x, y, heading), self.cfg.fov_deg, self.cfg.view_range)
        return FrontierView(f.cell, heading, dict(cats), free)

    def look_around(self, cause: str) -> None:
        """Stop, sweep a full panorama, rebuild memory. Costs ``reconstruct_ticks``."""
        cfg, w = self.cfg, self.world
        for _ in range(cfg.reconstruct_ticks):
            advance(w)
            self._record("reconstruct", CONTINUE if self.spec.monitored else None)
        views = []
        base = w.robot.heading
        for k in range(cfg.panorama_views):
            h = base + 2.0 * math.pi * k / cfg.panorama_views
            obs = sense(w, cfg.fov_deg, cfg.max_range, h)
            obs.cells = visible_cells(w, obs.pose, cfg.fov_deg, cfg.max_range)
            views.append(obs)
        reconstruct(self.memory, views)
        self.last_scan_odometry = w.robot.odometry
        self.memory.history.append(w.tick, "look_around", cause, "ok")
        self.counts["look_around"] += 1
        self.clip.clear()

    def _generic_guidance(self) -> GuidancePrompt:
        subs = self.task.subgoals
        watch = []
        for s in subs:
            watch += [s.object_query, s.receptacle_query]
        replan = {subs[j].object_query for j in self.progress.pending()}
        if self.progress.held is not None:
            replan.add(subs[self.progress.held].receptacle_query)
        # without a plan the monitor still knows what the arm is touching, nothing more
        expected = ()
        if self.manip_target is not None:
            query, rid = self.manip_target
            rec = self.memory.registry.records[rid]
            expected = ((query, rid, (rec.position[0], rec.position[1])),)
        return GuidancePrompt(self.phase, tuple(dict.fromkeys(watch)), frozenset({"target_shift"}),
                              expected, frozenset(replan), generic=True)

    def _tick(self, kind: str) -> ParseResult:
        """Post-step sensing and monitoring for one tick; logs exactly one record."""
        cfg, w = self.cfg, self.world
        if not self.spec.monitored:
            self._record(kind, None)
            return ParseResult([], CONTINUE)
        for req in self.locq.due(w.tick):
            p = req.result
            merge_detections(self.memory, [Sighting(req.detection.category, (float(p[0]), float(p[1]), float(p[2])),
                                                    req.kind, req.detection.object_id, req.record_hint,
                                                    req.detection.available)], w.tick)
        guidance = self.guidance if self.spec.guided else self._generic_guidance()
        fov = cfg.manip_fov_deg if self.phase in ("grasp", "place") else cfg.fov_deg
        obs = sense(w, fov, cfg.max_range)
        if self.grasp_point is not None and self.phase == "grasp":
            obj = w.objects.get(self.grasp_target)
            if obj is not None and obj.status == "free":
                obs.alignment_error = math.hypot(obj.x - self.grasp_point[0], obj.y - self.grasp_point[1])
        for _, rid, pos in guidance.expected:
            obs.expected_in_view[rid] = can_see(w, obs.pose, pos, fov, min(cfg.max_range, 2.0))
        self.clip.append(obs)
        if self.monitor_hook is not None:
            report = self.monitor_hook(self.clip, guidance, cfg, w.outcome.align_tol)
        else:
            report = monitor(self.clip, guidance, cfg, w.outcome.align_tol)
        result = parse(report, guidance, self.memory.registry, cfg)
        for entry in result.detections:
            self.locq.submit(entry.request(w.tick, cfg.resolve_after))
        extra = {"cause": list(result.cause)} if result.cause else None
        self._record(kind, result.mode, extra, len(obs.detections))
        for _ in range(cfg.monitor_tick_cost):
            advance(w)
            self._record("monitor", CONTINUE)
        return result

    def _request_replan(self, result: ParseResult) -> None:
        cause = result.cause or ("unspecified", None)
        self.replans[cause] += 1
        if self.replans[cause] > self.cfg.max_replans:
            raise EscalationLoop(f"replan cause {cause} repeated {self.replans[cause]} times")
        self.pending_replan = result
        self.clip.clear()

    # -- actions --------------------------------------------------------------

    def _set_phase(self, phase: str, target: str | None) -> None:
        self.phase = phase
        enter_phase(self.world, phase, target)

    def _navigate(self, d: PlanDecision) -> None:
        w = self.world
        target_ref = None
        if d.record_id is not None:
            target_ref = self.memory.registry.records[d.record_id].object_ref
        self._set_phase("explore" if d.action == "explore" else "navigate", target_ref)
        path = astar(self.memory.occupancy, w.robot_cell(), d.target)
        if path is None:
            self.look_around("no_path")
            return
        for cell in path[1:]:
            if self._timed_out():
                return
            try:
                step_motion(w, cell)
            except BlockedCell:
                self._record("motion", CONTINUE if self.spec.monitored else None, {"blocked": list(cell)})
                self.counts["blocked"] += 1
                self.look_around("blocked")
                return
            result = self._tick("motion")
            if result.mode == REPLAN:
                self._request_replan(result)
                return
            iv = self.spec.waypoint_interval
            if iv is not None and w.robot.odometry - self.last_scan_odometry >= iv - 1e-9:
                self.look_around("waypoint")
                return
        if d.action == "explore" or self.spec.rescan_on_arrival or d.partial:
            self.look_around("arrival")

    def _face(self, x: float, y: float) -> None:
        r = self.world.robot
        if math.hypot(x - r.x, y - r.y) > 1e-9:
            r.heading = math.atan2(y - r.y, x - r.x)

    def _manipulate(self, d: PlanDecision, kind: str) -> bool:
        """Run the timed part of grasp/place. False means the action was interrupted."""
        cfg, w = self.cfg, self.world
        needed = cfg.grasp_ticks if kind == "grasp" else cfg.place_ticks
        done = adjusts = 0
        while done < needed:
            if self._timed_out():
                return False
            advance(w)
            done += 1
            result = self._tick("manipulation")
            if result.mode == REPLAN:
                self._request_replan(result)
                return False
            if result.mode != ADJUST:
                continue
            self.counts["adjust"] += 1
            if adjusts >= cfg.max_adjust:
                self._request_replan(ParseResult([], REPLAN, ("adjust_exhausted", kind)))
                return False
            adjusts += 1
            if kind == "grasp":
                rec = self.memory.registry.records[d.record_id]
                try:
                    p = local_grasp_recompute(self.clip, rec.category)
                except NoFreshDetection:
                    self._request_replan(ParseResult([], REPLAN, ("no_fresh_detection", rec.category)))
                    return False
                r = w.robot
                if math.hypot(p[0] - r.x, p[1] - r.y) > w.outcome.grasp_range:
                    self.subs[d.subgoal].failure = "manipulation.no_grasp_pose"
                    self._request_replan(ParseResult([], REPLAN, ("no_grasp_pose", rec.category)))
                    return False
                self.grasp_point = p
                rec.position = p
                self._face(p[0], p[1])
            self.clip.clear()
            done = max(0, done - cfg.adjust_ticks)
        return True

    def _grasp(self, d: PlanDecision) -> None:
        w, j = self.world, d.subgoal
        rec = self.memory.registry.records[d.record_id]
        self.grasp_target = rec.object_ref
        self.grasp_point = rec.position
        self.manip_target = (self.task.subgoals[j].object_query, rec.id)
        self._face(rec.position[0], rec.position[1])
        self._set_phase("grasp", rec.object_ref)
        try:
            if not self._manipulate(d, "grasp"):
                return
            obj = w.objects.get(rec.object_ref)
            err = math.hypot(obj.x - self.grasp_point[0], obj.y - self.grasp_point[1]) if obj else math.inf
            try:
                outcome = attempt_grasp(w, rec.object_ref, err)
            except (ObjectMissing, OutOfRange):
                mark_stale(self.memory, rec.id)
                self.memory.history.append(w.tick, "grasp", rec.id, "object_missing")
                self.subs[j].failure = "manipulation.not_detected"
                self.look_around("object_missing")
                return
        finally:
            self.grasp_point = None
            self.manip_target = None
        self.subs[j].attempts += 1
        self.memory.history.append(w.tick, "grasp", rec.id, "success" if outcome.success else outcome.reason)
        if outcome.success:
            self.progress.status[j] = HELD
            self.progress.held = j
            self.subs[j].grasped = True
            mark_stale(self.memory, rec.id)
        elif outcome.reason == "collision":
            mark_stale(self.memory, rec.id)
            self._fail(j, "manipulation.collision")
        elif self.subs[j].attempts >= self.cfg.max_grasp_attempts:
            self._fail(j, "manipulation.failed_grasp")
        if self.spec.rescan_after_action or not outcome.success:
            self.look_around("after_grasp")

    def _place(self, d: PlanDecision) -> None:
        w, j = self.world, d.subgoal
        rec = self.memory.registry.records[d.record_id]
        self._face(rec.position[0], rec.position[1])
        self._set_phase("place", rec.object_ref)
        self.manip_target = (self.task.subgoals[j].receptacle_query, rec.id)
        try:
            if not self._manipulate(d, "place"):
                return
        finally:
            self.manip_target = None
        try:
            attempt_place(w, rec.object_ref)
        except (ReceptacleUnavailable, OutOfRange):
            rec.available = False
            mark_stale(self.memory, rec.id)
            self.memory.history.append(w.tick, "place", rec.id, "unavailable")
            self.subs[j].failure = "placing.misaligned"
            self.look_around("receptacle_unavailable")
            return
        self.memory.history.append(w.tick, "place", rec.id, "success")
        self.progress.status[j] = DONE
        self.progress.held = None
        self.subs[j].path_len = w.robot.odometry - self.subs[j].odometry_start
        for k in self.progress.pending():
            self.subs[k].odometry_start = w.robot.odometry
        if self.spec.rescan_after_action:
            self.look_around("after_place")

    def _execute(self, d: PlanDecision) -> None:
        self.action = d.action
        self.guidance = d.guidance
        self.memory.tick = self.world.tick
        self.memory.history.append(self.world.tick, d.action, d.target, "started")
        if d.action in ("explore", "go_to"):
            self._navigate(d)
        elif d.action == "grasp":
            self._grasp(d)
        elif d.action == "place":
            self._place(d)
        else:
            raise ValueError(d.action)

    # -- main loop ------------------------------------------------------------

    def run(self) -> EpisodeResult:
        self.action = "look_around"
        self.look_around("start")
        while self.terminated is None:
            if self._timed_out():
                break
            self.memory.tick = self.world.tick
            try:
                if self.pending_replan is not None:
                    result, self.pending_replan = self.pending_replan, None
                    self.action = "look_around"
                    d = self.planner.replan_on_report(self.task, self.memory, self.progress, self._robot(), result,
                                                      lambda: self.look_around("replan"), self._frontier_view)
                else:
                    d = self.planner.plan(self.task, self.memory, self.progress, self._robot(), self._frontier_view)
            except TaskComplete:
                break
            except NoFrontier as exc:
                self._fail(exc.subgoal, "placing.misaligned" if exc.holding else self._not_found(exc.subgoal))
                continue
            try:
                self._execute(d)
            except EscalationLoop:
                self.terminated = "escalation"
                j = d.subgoal if d.subgoal is not None else (self.progress.pending() or [0])[0]
                self._fail(j, "navigation.collision_stop")
        return self._result()

    def _not_found(self, j: int) -> str:
        return self.subs[j].failure or "navigation.wrong_localization"

    def _result(self) -> EpisodeResult:
        w = self.world
        for j, status in enumerate(self.progress.status):
            if status in (DONE, FAILED):
                continue
            if status == HELD:
                failure = "placing.misaligned"
            elif self.subs[j].attempts:
                failure = "manipulation.failed_grasp"
            else:
                failure = self._not_found(j)
            if self.terminated == "escalation":
                failure = "navigation.collision_stop"
            self._fail(j, failure)
        outcomes = []
        for j, s in enumerate(self.subs):
            ok = self.progress.status[j] == DONE
            outcomes.append(SubgoalOutcome(ok, s.path_len, self.expert[j], None if ok else s.failure))
        first = outcomes[self.failure_order[0]].failure_class if self.failure_order else None
        return EpisodeResult(
            subgoal_outcomes=outcomes,
            total_path_len=w.robot.odometry,
            total_ticks=w.tick,
            failure_class=first,
            variant=self.variant,
            scenario=self.scenario,
            seed=w.rng_seed,
            counts={k: int(v) for k, v in sorted(self.counts.items())},
        )


def run_episode(world: WorldState, task: TaskInstruction, variant: str = "binder", cfg: SimConfig = DEFAULT_CONFIG,
                seed: int | None = None, scenario: str = "", scorer=None, monitor_hook=None):
    """Run one episode on a private copy of ``world``; returns (result, trace)."""
    w = world.snapshot()
    if seed is not None:
        w.rng_seed = int(seed)
    ep = Episode(w, task, variant, cfg, scorer=scorer, monitor_hook=monitor_hook, scenario=scenario)
    result = ep.run()
    return result, ep.trace, ep


def subgoal_matches(world: WorldState, task: TaskInstruction, theta: float) -> bool:
    """Every subgoal query names at least one object and one receptacle in the scene."""
    for s in task.subgoals:
        if not any(similarity(o.category, s.object_query) >= theta for o in world.objects.values()):
            return False
        if not any(similarity(r.category, s.receptacle_query) >= theta for r in world.receptacles.values()):
            return False
    return True
