"""Fast per-tick monitor: clip buffer, guidance-conditioned report, mode parse."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .config import DEFAULT_CONFIG, SimConfig
from .drm import GuidancePrompt
from .exploration import similarity
from .localization import LocalizationRequest, localize
from .memory import ObjectRegistry
from .world import Detection, Observation

CONTINUE, ADJUST, REPLAN = "CONTINUE", "ADJUST", "REPLAN"
MODES = (CONTINUE, ADJUST, REPLAN)
SEVERITY = {CONTINUE: 0, ADJUST: 1, REPLAN: 2}
MANIPULATION_PHASES = ("grasp", "place")


class NoFreshDetection(Exception):
    pass


class Clip:
    """The last ``window`` frames, each with its detections already localised."""

    def __init__(self, window: int = 8):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.frames: deque[tuple[Observation, list[np.ndarray]]] = deque(maxlen=window)

    def append(self, obs: Observation) -> None:
        self.frames.append((obs, [localize(d, obs.pose) for d in obs.detections]))

    def clear(self) -> None:
        self.frames.clear()

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def last(self) -> Observation | None:
        return self.frames[-1][0] if self.frames else None


@dataclass
class Mention:
    category: str
    kind: str
    entity: str | None
    salience: float
    position: tuple[float, float, float]
    detection: Detection
    pose: tuple[float, float, float]
    tick: int


@dataclass
class Flag:
    name: str  # target_appeared | object_shifted | misalignment | receptacle_unavailable | grasp_slipping
    entity: str | None = None
    magnitude: float = 0.0
    record_id: str | None = None
    position: tuple[float, float] | None = None


@dataclass
class MonitorReport:
    tick: int
    phase: str
    mentions: list[Mention] = field(default_factory=list)
    progress_flags: list[str] = field(default_factory=list)
    anomaly_flags: list[Flag] = field(default_factory=list)
    text: str = ""

    @property
    def shift(self) -> float:
        return max((f.magnitude for f in self.anomaly_flags if f.name == "object_shifted"), default=0.0)


@dataclass
class DetectionEntry:
    """One X_t item: a mention waiting for asynchronous localisation."""

    mention: Mention
    record_hint: str | None = None

    def request(self, now: int, delay: int) -> LocalizationRequest:
        m = self.mention
        return LocalizationRequest(m.entity or m.category, m.kind, m.detection, m.pose, now, now + delay,
                                   self.record_hint)


@dataclass
class ParseResult:
    detections: list[DetectionEntry]
    mode: str
    cause: tuple[str, str | None] | None = None


def match_entity(category: str, watch, theta: float) -> str | None:
    best, best_s = None, theta
    for e in watch:
        s = similarity(category, e)
        if s >= best_s and (best is None or s > best_s):
            best, best_s = e, s
    return best


def _d2(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _spread(clip: Clip, category: str, anchor) -> float:
    """Largest pairwise distance between per-frame sightings of ``category`` near the anchor."""
    pts = []
    for obs, positions in clip.frames:
        best = None
        for det, p in zip(obs.detections, positions):
            if det.category == category and (best is None or _d2(p, anchor) < _d2(best, anchor)):
                best = p
        if best is not None:
            pts.append(best)
    worst = 0.0
    for a in range(len(pts)):
        for b in range(a + 1, len(pts)):
            worst = max(worst, _d2(pts[a], pts[b]))
    return worst


def monitor(clip: Clip, guidance: GuidancePrompt, cfg: SimConfig = DEFAULT_CONFIG,
            align_tol: float = 0.05) -> MonitorReport:
    """Describe the clip, paying attention to what the guidance asks for."""
    if not len(clip):
        return MonitorReport(tick=0, phase=guidance.phase, text="no frames")
    obs, positions = clip.frames[-1]
    report = MonitorReport(tick=obs.tick, phase=guidance.phase)
    raw = []
    for det, p in zip(obs.detections, positions):
        rng = float(np.median([s[2] for s in det.range_samples])) if det.range_samples else math.inf
        entity = match_entity(det.category, guidance.watch_entities, cfg.theta_match)
        raw.append(Mention(det.category, det.kind, entity, 1.0 / (1.0 + rng), tuple(float(v) for v in p),
                           det, obs.pose, obs.tick))
    if guidance.generic:
        raw.sort(key=lambda m: (-m.salience, m.category))
        report.mentions = raw[: cfg.generic_slots]
    else:
        report.mentions = [m for m in raw if m.entity is not None]

    checks = guidance.anomaly_checks
    expected: dict[str, list] = {}
    for ent, rid, pos in guidance.expected:
        expected.setdefault(ent, []).append((rid, pos))

    for m in report.mentions:
        if m.entity is None:
            continue
        report.progress_flags.append(f"{m.entity} visible")
        known = expected.get(m.entity, [])
        if not known:
            report.anomaly_flags.append(Flag("target_appeared", m.entity, 0.0, None, m.position[:2]))
            continue
        rid, pos = min(known, key=lambda rp: (_d2(rp[1], m.position), rp[0]))
        if "target_shift" in checks:
            shift = max(_d2(pos, m.position), _spread(clip, m.category, m.position))
            if shift > cfg.shift_tol:
                report.anomaly_flags.append(Flag("object_shifted", m.entity, shift, rid, m.position[:2]))
        if "availability" in checks and m.kind == "receptacle" and not m.detection.available:
            report.anomaly_flags.append(Flag("receptacle_unavailable", m.entity, 0.0, rid, m.position[:2]))
    if guidance.generic and "target_shift" in checks:
        for m in report.mentions:
            if m.entity is None or m.entity in expected:
                continue
            shift = _spread(clip, m.category, m.position)
            if shift > cfg.shift_tol:
                report.anomaly_flags.append(Flag("object_shifted", m.entity, shift, None, m.position[:2]))

    if "availability" in checks:
        for ent, recs in expected.items():
            for rid, pos in recs:
                if not obs.expected_in_view.get(rid):
                    continue
                present = any(
                    _d2(p, pos) <= cfg.shift_tol and match_entity(d.category, (ent,), cfg.theta_match)
                    for d, p in zip(obs.detections, positions)
                )
                if not present and all(f.record_id != rid for f in report.anomaly_flags):
                    report.anomaly_flags.append(Flag("receptacle_unavailable", ent, 0.0, rid, pos))
    if "alignment" in checks and obs.alignment_error is not None and obs.alignment_error > align_tol:
        report.anomaly_flags.append(Flag("misalignment", None, obs.alignment_error))

    seen = ", ".join(sorted({m.category for m in report.mentions})) or "nothing of interest"
    issues = ", ".join(f.name + (f"({f.entity})" if f.entity else "") for f in report.anomaly_flags) or "none"
    report.text = f"[{guidance.phase}] sees {seen}; anomalies: {issues}"
    return report


def _registered(registry: ObjectRegistry, entity: str, pos, cfg: SimConfig) -> bool:
    for rec in registry.live():
        if similarity(rec.category, entity) >= cfg.theta_match and _d2(rec.position, pos) <= cfg.merge_radius:
            return True
    return False


def parse(report: MonitorReport, guidance: GuidancePrompt, registry: ObjectRegistry,
          cfg: SimConfig = DEFAULT_CONFIG) -> ParseResult:
    """Turn a report into X_t plus the single most severe execution mode."""
    hints = {f.entity: f.record_id for f in report.anomaly_flags if f.name == "object_shifted" and f.record_id}
    entries = [DetectionEntry(m, hints.get(m.entity)) for m in report.mentions if m.entity is not None]
    if not guidance.anomaly_checks:
        return ParseResult(entries, CONTINUE)

    mode, cause = CONTINUE, None
    manip = guidance.phase in MANIPULATION_PHASES
    for f in report.anomaly_flags:
        want = CONTINUE
        if f.name == "target_appeared":
            if f.entity in guidance.replan_entities and not _registered(registry, f.entity, f.position, cfg):
                want = REPLAN
        elif f.name == "receptacle_unavailable":
            want = REPLAN
        elif f.name in ("misalignment", "grasp_slipping"):
            want = ADJUST if manip else CONTINUE
        elif f.name == "object_shifted":
            if manip:
                want = ADJUST
            elif f.magnitude > cfg.reroute_tol:
                want = REPLAN
        if SEVERITY[want] > SEVERITY[mode]:
            mode, cause = want, (f.name, f.entity)
    return ParseResult(entries, mode, cause)


def local_grasp_recompute(clip: Clip, category: str) -> tuple[float, float, float]:
    """Grasp point from the freshest frame that still shows ``category``."""
    for obs, positions in reversed(clip.frames):
        for det, p in zip(obs.detections, positions):
            if det.category == category:
                return (float(p[0]), float(p[1]), float(p[2]))
    raise NoFreshDetection(category)

