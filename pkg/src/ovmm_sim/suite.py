"""Suite runner: every (scenario, instruction, variant, seed) tuple, with traces on disk."""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .config import DEFAULT_CONFIG, SimConfig
from .drm import TaskInstruction
from .executor import FAILURE_CLASSES, run_episode, variant_spec
from .metrics import EpisodeResult, MetricsSummary, aggregate, compute_pspl, compute_spl
from .world import InvalidScenario, load_scenario, world_from_dict, world_to_dict

STAGES = tuple(FAILURE_CLASSES)  # navigation -> manipulation -> placing


class FairnessError(RuntimeError):
    """Two variants were handed different inputs for the same suite cell."""


class ReplayMismatch(RuntimeError):
    pass


@dataclass
class SuiteSpec:
    scenarios: list[str]
    variants: list[str]
    seeds: list[int] | None = None  # None: use each scenario file's own seed
    instructions: list[int] | None = None  # indices into each file's instruction list; None: all
    dynamic: bool = True  # False strips every scripted event
    name: str = "suite"

    def __post_init__(self):
        if not self.scenarios:
            raise ValueError("suite has no scenarios")
        if not self.variants:
            raise ValueError("suite has no variants")
        for v in self.variants:
            variant_spec(v)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path | None = None) -> "SuiteSpec":
        data = dict(data)
        if base_dir is not None:
            data["scenarios"] = [str(Path(base_dir) / p) if not os.path.isabs(p) else p for p in data["scenarios"]]
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "SuiteSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), Path(path).parent)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def input_hash(world_dict: dict, instruction: dict, seed: int) -> str:
    blob = canonical_json({"world": world_dict, "instruction": instruction, "seed": int(seed)})
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def trace_text(trace: list[dict], result: EpisodeResult, extra: dict | None = None) -> str:
    lines = [json.dumps(rec, sort_keys=True) for rec in trace]
    summary = {"kind": "summary", **result.to_dict(), **(extra or {})}
    lines.append(json.dumps(summary, sort_keys=True))
    return "\n".join(lines) + "\n"


def read_trace(path: str | Path) -> tuple[list[dict], dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    if not records or records[-1].get("kind") != "summary":
        raise ReplayMismatch(f"{path}: no terminal summary record")
    return records[:-1], records[-1]


@dataclass
class ReplayReport:
    odometry: float
    ticks: int
    success: bool
    spl: float
    pspl: float
    failure_class: str | None


def replay(records: list[dict], summary: dict) -> ReplayReport:
    """Re-derive odometry, tick count and metrics from a trace and check them against its summary."""
    odometry = 0.0
    prev = None
    for rec in records:
        x, y = rec["pose"][0], rec["pose"][1]
        if prev is not None and (x, y) != prev:
            odometry += math.hypot(x - prev[0], y - prev[1])
        prev = (x, y)
        if odometry != rec["odometry"]:
            raise ReplayMismatch(f"tick {rec['tick']}: odometry {odometry!r} != logged {rec['odometry']!r}")
    ticks = len(records)
    if records and [r["tick"] for r in records] != list(range(1, ticks + 1)):
        raise ReplayMismatch("tick records are not contiguous from 1")
    result = EpisodeResult.from_dict({k: v for k, v in summary.items() if k not in ("kind",) and k in _RESULT_KEYS})
    if odometry != result.total_path_len:
        raise ReplayMismatch(f"odometry {odometry!r} != summary {result.total_path_len!r}")
    if ticks != result.total_ticks:
        raise ReplayMismatch(f"{ticks} tick records but summary says {result.total_ticks}")
    spl = compute_spl(result.success, odometry, result.expert_path_len)
    return ReplayReport(odometry, ticks, result.success, spl, compute_pspl(result.subgoal_outcomes),
                        result.failure_class)


_RESULT_KEYS = {"subgoal_outcomes", "total_path_len", "total_ticks", "failure_class", "variant", "scenario",
                "seed", "counts", "success"}


@dataclass
class FailureTaxonomyReport:
    counts: dict
    flow: dict  # stage -> {"entered", "failed", "passed"}
    successes: int
    total: int

    @classmethod
    def from_results(cls, results: list[EpisodeResult]) -> "FailureTaxonomyReport":
        counts: dict[str, int] = defaultdict(int)
        failed_at: dict[str, int] = defaultdict(int)
        for r in results:
            if r.success:
                continue
            if not r.failure_class:
                raise ValueError(f"failed episode {r.scenario!r} has no failure class")
            stage = r.failure_class.split(".", 1)[0]
            if stage not in STAGES:
                raise ValueError(f"unknown failure stage in {r.failure_class!r}")
            counts[r.failure_class] += 1
            failed_at[stage] += 1
        flow, entering = {}, len(results)
        for stage in STAGES:
            passed = entering - failed_at[stage]
            flow[stage] = {"entered": entering, "failed": failed_at[stage], "passed": passed}
            entering = passed
        return cls(dict(sorted(counts.items())), flow, sum(r.success for r in results), len(results))

    def conserved(self) -> bool:
        entering = self.total
        for stage in STAGES:
            f = self.flow[stage]
            if f["entered"] != entering or f["passed"] + f["failed"] != f["entered"]:
                return False
            entering = f["passed"]
        return entering == self.successes

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SuiteRow:
    scenario: str
    instruction: int
    task_size: int
    variant: str
    seed: int
    input_hash: str
    result: EpisodeResult

    @property
    def key(self):
        return (self.scenario, self.instruction, self.seed, self.variant)


@dataclass
class SuiteResult:
    spec: SuiteSpec
    rows: list[SuiteRow]
    summaries: dict = field(default_factory=dict)  # (variant, task_size) -> MetricsSummary
    taxonomy: dict = field(default_factory=dict)  # variant -> FailureTaxonomyReport
    inputs: dict = field(default_factory=dict)  # "scenario#instruction#seed" -> hash

    def to_dict(self) -> dict:
        return {
            "suite": self.spec.to_dict(),
            "inputs": self.inputs,
            "summaries": [{"variant": v, "task_size": n, **s.to_dict()}
                          for (v, n), s in sorted(self.summaries.items())],
            "taxonomy": {v: t.to_dict() for v, t in sorted(self.taxonomy.items())},
            "rows": [{"scenario": r.scenario, "instruction": r.instruction, "task_size": r.task_size,
                      "variant": r.variant, "seed": r.seed, "input_hash": r.input_hash,
                      "result": r.result.to_dict()} for r in self.rows],
        }


def _scenario_name(path: str, data: dict) -> str:
    return data.get("name") or Path(path).stem


def _load(path: str, dynamic: bool) -> dict:
    try:
        data = load_scenario(path)
    except OSError as exc:
        raise InvalidScenario(f"{path}: {exc}") from exc
    if not dynamic:
        data = {**data, "events": []}
    return data


def _run_one(job) -> tuple[SuiteRow, list[dict]]:
    path, data, k, seed, variant, cfg_dict = job
    cfg = SimConfig.from_dict(cfg_dict)
    world = world_from_dict(data, path)
    instr = data["instructions"][k]
    task = TaskInstruction.from_dict(instr)
    h = input_hash(world_to_dict(world), task.to_dict(), seed)
    name = _scenario_name(path, data)
    result, trace, _ = run_episode(world, task, variant, cfg, seed=seed, scenario=name)
    return SuiteRow(name, k, len(task.subgoals), variant, int(seed), h, result), trace


def trace_filename(row: SuiteRow) -> str:
    return f"{row.scenario}-i{row.instruction}-s{row.seed}-{row.variant.replace(':', '_')}.ndjson"


def run_suite(spec: SuiteSpec, cfg: SimConfig = DEFAULT_CONFIG, out_dir: str | Path | None = None,
              workers: int = 1) -> SuiteResult:
    jobs = []
    for path in spec.scenarios:
        data = _load(path, spec.dynamic)
        world_from_dict(data, path)  # fail early, with the file name, before anything runs
        n_instr = len(data.get("instructions", []))
        if n_instr == 0:
            raise InvalidScenario(f"{path}: no instructions")
        indices = spec.instructions if spec.instructions is not None else range(n_instr)
        seeds = spec.seeds if spec.seeds is not None else [int(data.get("seed", 0))]
        for k in indices:
            if not 0 <= k < n_instr:
                raise InvalidScenario(f"{path}: instruction index {k} out of range")
            for seed in seeds:
                for variant in spec.variants:
                    jobs.append((str(path), data, k, int(seed), variant, cfg.to_dict()))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_one, jobs))
    else:
        outputs = [_run_one(j) for j in jobs]
    outputs.sort(key=lambda rt: rt[0].key)

    inputs: dict[str, str] = {}
    for row, trace in outputs:
        cell = f"{row.scenario}#{row.instruction}#{row.seed}"
        if inputs.setdefault(cell, row.input_hash) != row.input_hash:
            raise FairnessError(f"{cell}: variant {row.variant} saw different inputs")
        if out_dir is not None:
            atomic_write(Path(out_dir) / "traces" / trace_filename(row),
                         trace_text(trace, row.result, {"input_hash": row.input_hash}))

    rows = [row for row, _ in outputs]
    groups: dict[tuple[str, int], list[EpisodeResult]] = defaultdict(list)
    by_variant: dict[str, list[EpisodeResult]] = defaultdict(list)
    for row in rows:
        groups[(row.variant, row.task_size)].append(row.result)
        by_variant[row.variant].append(row.result)
    summaries = {key: aggregate(res) for key, res in groups.items()}
    taxonomy = {v: FailureTaxonomyReport.from_results(res) for v, res in by_variant.items()}
    out = SuiteResult(spec, rows, summaries, taxonomy, dict(sorted(inputs.items())))
    if out_dir is not None:
        atomic_write(Path(out_dir) / "summary.json", json.dumps(out.to_dict(), sort_keys=True, indent=1) + "\n")
    return out


def summaries_from_file(path: str | Path) -> tuple[dict, dict]:
    """(variant, task_size) -> MetricsSummary and variant -> taxonomy dict, read back from summary.json."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    summaries = {}
    for s in data["summaries"]:
        s = dict(s)
        key = (s.pop("variant"), s.pop("task_size"))
        for k in ("avg_ticks", "avg_path_len"):
            if s[k] is None:
                s[k] = math.nan
        summaries[key] = MetricsSummary(**s)
    return summaries, data.get("taxonomy", {})
