"""Agent memory: semantic grid, occupancy projection, action history, object registry."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .geometry import Cell, to_cell
from .localization import localize
from .world import Observation

UNKNOWN, FREE, OCCUPIED = 0, 1, 2
STATE_NAMES = {UNKNOWN: "unknown", FREE: "free", OCCUPIED: "occupied"}


class UnknownId(KeyError):
    pass


@dataclass
class SemanticGrid:
    state: np.ndarray  # [y, x] int8
    last_seen: np.ndarray  # [y, x] float, -inf when never observed
    labels: dict[Cell, Counter] = field(default_factory=dict)

    @classmethod
    def empty(cls, width: int, height: int) -> "SemanticGrid":
        return cls(np.zeros((height, width), dtype=np.int8), np.full((height, width), -np.inf))

    @property
    def width(self) -> int:
        return self.state.shape[1]

    @property
    def height(self) -> int:
        return self.state.shape[0]


@dataclass
class OccupancyGrid:
    cells: np.ndarray  # [y, x] int8, same codes as SemanticGrid.state

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    def in_bounds(self, c: Cell) -> bool:
        return 0 <= c[0] < self.width and 0 <= c[1] < self.height

    def state(self, c: Cell) -> int:
        return int(self.cells[c[1], c[0]])

    def is_free(self, c: Cell) -> bool:
        return self.in_bounds(c) and self.cells[c[1], c[0]] == FREE

    @classmethod
    def from_rows(cls, rows: list[str]) -> "OccupancyGrid":
        """Build from text rows ('.' free, '#' occupied, '?' unknown), row 0 = y 0."""
        code = {".": FREE, "#": OCCUPIED, "?": UNKNOWN}
        return cls(np.array([[code[ch] for ch in row] for row in rows], dtype=np.int8))


def project_occupancy(semantic: SemanticGrid) -> OccupancyGrid:
    return OccupancyGrid(semantic.state.copy())


@dataclass
class RegistryRecord:
    id: str
    category: str
    kind: str
    position: tuple[float, float, float]
    last_confirmed: int
    source: str  # reconstruction | irm_detection
    stale: bool = False
    available: bool = True
    # physical handle the grasp/place controllers bind to; planners ignore it
    object_ref: str | None = None


@dataclass
class ObjectRegistry:
    records: dict[str, RegistryRecord] = field(default_factory=dict)
    next_id: int = 1

    def __len__(self) -> int:
        return len(self.records)

    def new_record(self, **kw) -> RegistryRecord:
        rid = f"r{self.next_id:03d}"
        self.next_id += 1
        rec = RegistryRecord(id=rid, **kw)
        self.records[rid] = rec
        return rec

    def nearest(self, category: str, pos, radius: float, include_stale: bool = True) -> RegistryRecord | None:
        best, best_d = None, math.inf
        for rec in self.records.values():
            if rec.category != category or (rec.stale and not include_stale):
                continue
            d = math.hypot(rec.position[0] - pos[0], rec.position[1] - pos[1])
            if d <= radius and (d < best_d or (d == best_d and rec.id < best.id)):
                best, best_d = rec, d
        return best

    def live(self) -> list[RegistryRecord]:
        return [r for r in self.records.values() if not r.stale and r.available]


@dataclass
class HistoryEntry:
    tick: int
    action: str
    target: object
    outcome: str


class ActionHistory:
    def __init__(self):
        self._entries: list[HistoryEntry] = []

    def append(self, tick: int, action: str, target, outcome: str) -> None:
        self._entries.append(HistoryEntry(tick, action, target, outcome))

    @property
    def entries(self) -> tuple[HistoryEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)


@dataclass
class AgentMemory:
    semantic: SemanticGrid
    occupancy: OccupancyGrid
    history: ActionHistory
    registry: ObjectRegistry
    cell_size: float
    merge_radius: float = 0.5
    tick: int = 0

    @classmethod
    def empty(cls, width: int, height: int, cell_size: float, merge_radius: float = 0.5) -> "AgentMemory":
        sem = SemanticGrid.empty(width, height)
        return cls(sem, project_occupancy(sem), ActionHistory(), ObjectRegistry(), cell_size, merge_radius)

    def to_dict(self) -> dict:
        sem = self.semantic
        last_seen = [None if math.isinf(v) else int(v) for v in sem.last_seen.ravel().tolist()]
        return {
            "width": sem.width,
            "height": sem.height,
            "cell_size": self.cell_size,
            "tick": self.tick,
            "semantic_state": sem.state.ravel().tolist(),
            "occupancy": self.occupancy.cells.ravel().tolist(),
            "last_seen": last_seen,
            "labels": [
                {"cell": list(c), "counts": dict(sorted(cnt.items()))}
                for c, cnt in sorted(sem.labels.items(), key=lambda kv: (kv[0][1], kv[0][0]))
            ],
            "registry": [
                {
                    "id": r.id, "category": r.category, "kind": r.kind,
                    "position": [float(v) for v in r.position], "last_confirmed": r.last_confirmed,
                    "source": r.source, "stale": r.stale, "available": r.available,
                }
                for r in self.registry.records.values()
            ],
        }


@dataclass
class Sighting:
    """One (category, position) entry headed for the registry."""

    category: str
    position: tuple[float, float, float]
    kind: str = "object"
    object_ref: str | None = None
    record_hint: str | None = None
    available: bool = True


def _cluster(sightings: list[Sighting], radius: float) -> list[list[Sighting]]:
    """Single-linkage clusters per category, deterministic after sorting."""
    items = sorted(sightings, key=lambda s: (s.category, s.position[0], s.position[1], s.position[2]))
    parent = list(range(len(items)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a in range(len(items)):
        for b in range(a + 1, len(items)):
            if items[a].category != items[b].category:
                continue
            pa, pb = items[a].position, items[b].position
            if math.hypot(pa[0] - pb[0], pa[1] - pb[1]) <= radius:
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[Sighting]] = {}
    for idx in range(len(items)):
        groups.setdefault(find(idx), []).append(items[idx])
    return [groups[k] for k in sorted(groups)]


def _summarise(group: list[Sighting]):
    pos = tuple(float(v) for v in np.median(np.array([s.position for s in group]), axis=0))
    refs = Counter(s.object_ref for s in group if s.object_ref is not None)
    ref = min(refs, key=lambda r: (-refs[r], r)) if refs else None
    hints = sorted({s.record_hint for s in group if s.record_hint})
    return pos, ref, (hints[0] if hints else None), all(s.available for s in group)


def _upsert(memory: AgentMemory, group: list[Sighting], tick: int, source: str) -> RegistryRecord:
    pos, ref, hint, available = _summarise(group)
    first = group[0]
    reg = memory.registry
    rec = reg.records.get(hint) if hint else None
    if rec is None or rec.category != first.category:
        rec = reg.nearest(first.category, pos, memory.merge_radius)
    if rec is None:
        return reg.new_record(category=first.category, kind=first.kind, position=pos, last_confirmed=tick,
                              source=source, available=available, object_ref=ref)
    rec.position = pos
    rec.last_confirmed = tick
    rec.source = source
    rec.stale = False
    rec.available = available
    if ref is not None:
        rec.object_ref = ref
    return rec


def sightings_from(observations: list[Observation]) -> list[Sighting]:
    out = []
    for obs in observations:
        for det in obs.detections:
            p = localize(det, obs.pose)
            out.append(Sighting(det.category, (float(p[0]), float(p[1]), float(p[2])), det.kind,
                                det.object_id, available=det.available))
    return out


def reconstruct(memory: AgentMemory, panorama: list[Observation]) -> AgentMemory:
    """Full refresh from a look-around panorama.

    Each observation must carry ``cells`` (cell -> is_obstacle) for its view.
    Registry records whose cell was in view but that nobody re-detected are
    flagged stale.
    """
    if not panorama:
        return memory
    tick = max(o.tick for o in panorama)
    sem = memory.semantic
    seen: set[Cell] = set()
    for obs in panorama:
        for c, blocked in (obs.cells or {}).items():
            seen.add(c)
            sem.state[c[1], c[0]] = OCCUPIED if blocked else FREE
            sem.last_seen[c[1], c[0]] = max(sem.last_seen[c[1], c[0]], tick)
    sightings = sightings_from(panorama)
    for s in sightings:
        c = to_cell(s.position[0], s.position[1], memory.cell_size)
        if 0 <= c[0] < sem.width and 0 <= c[1] < sem.height:
            sem.labels.setdefault(c, Counter())[s.category] += 1
    touched = set()
    for group in _cluster(sightings, memory.merge_radius):
        touched.add(_upsert(memory, group, tick, "reconstruction").id)
    for rec in memory.registry.records.values():
        if rec.id in touched or rec.stale:
            continue
        if to_cell(rec.position[0], rec.position[1], memory.cell_size) in seen:
            rec.stale = True
    memory.occupancy = project_occupancy(sem)
    memory.tick = max(memory.tick, tick)
    return memory


def merge_detections(memory: AgentMemory, detections: list[Sighting], tick: int | None = None) -> AgentMemory:
    """Registry-only incremental update; grids are left untouched."""
    tick = memory.tick if tick is None else tick
    for s in detections:
        if not all(math.isfinite(v) for v in s.position):
            raise ValueError(f"non-finite position for {s.category}")
    for group in _cluster(list(detections), memory.merge_radius):
        _upsert(memory, group, tick, "irm_detection")
    memory.tick = max(memory.tick, tick)
    return memory


def mark_stale(memory: AgentMemory, record_id: str) -> AgentMemory:
    rec = memory.registry.records.get(record_id)
    if rec is None:
        raise UnknownId(record_id)
    rec.stale = True
    return memory
