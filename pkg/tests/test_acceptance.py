"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Criteria 5-7 share one generated dynamic suite (100 seeded scenes, three
templates, each file carrying a 3-subgoal instruction plus its 1- and
2-subgoal prefixes). Expect a few minutes of runtime on one core.
"""

import json
import math
import random
import time
from pathlib import Path

import numpy as np
import pytest

from ovmm_sim.config import DEFAULT_CONFIG
from ovmm_sim.drm import TaskInstruction
from ovmm_sim.exploration import Frontier, astar, select_topk_diverse
from ovmm_sim.executor import VARIANTS, run_episode
from ovmm_sim.localization import localize, project_sample
from ovmm_sim.memory import FREE, OCCUPIED, OccupancyGrid
from ovmm_sim.metrics import EpisodeResult, SubgoalOutcome, aggregate, compute_pspl, compute_spl
from ovmm_sim.scenarios import (
    displaced_grasp_scenario,
    en_route_scenario,
    generate_suite,
    static_visible_scenario,
    tabletop_scenario,
)
from ovmm_sim.suite import SuiteSpec, input_hash, run_suite, trace_text
from ovmm_sim.world import Detection, world_from_dict, world_to_dict

from test_exploration import _bfs_len, _oracle_topk
from test_irm import _oracle_median

CFG = DEFAULT_CONFIG
ABLATION = ["binder", "irm_only", "drm_only", "neither"]
BASELINES = ["sparse_update", "waypoint_update"]
GAP = 0.05
EPS = 1e-9
N_SUITE = 100


def verdict(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {number} {title}: {'PASS' if ok else 'FAIL'} | {detail}")
    assert ok, detail


def run(data, variant, seed=None):
    task = TaskInstruction.from_dict(data["instructions"][0])
    return run_episode(world_from_dict(data), task, variant, CFG, seed=seed)


# -- shared dynamic suite -----------------------------------------------------

@pytest.fixture(scope="module")
def suite_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("dynamic_suite")
    paths = []
    for data in generate_suite(N_SUITE, 3, base_seed=1000, prefixes=True):
        p = d / f"{data['name']}.json"
        p.write_text(json.dumps(data))
        paths.append(str(p))
    return paths


@pytest.fixture(scope="module")
def ablation(suite_files, tmp_path_factory):
    out = tmp_path_factory.mktemp("ablation")
    t0 = time.perf_counter()
    res = run_suite(SuiteSpec(suite_files, ABLATION, instructions=[0], name="ablation"), CFG, out)
    return res, time.perf_counter() - t0, out


@pytest.fixture(scope="module")
def baselines(suite_files, tmp_path_factory):
    out = tmp_path_factory.mktemp("baselines")
    res = run_suite(SuiteSpec(suite_files, ["binder"] + BASELINES, name="baselines"), CFG, out)
    return res, out


# -- 1 --------------------------------------------------------------------------

def test_criterion_1_oracle_equivalence(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    astar_ok = solved = 0
    while solved < 200:
        g = np.where(rng.random((20, 20)) < 0.3, OCCUPIED, FREE).astype(np.int8)
        free = np.argwhere(g == FREE)
        s, t = free[rng.choice(len(free), 2, replace=False)]
        start, goal = (int(s[1]), int(s[0])), (int(t[1]), int(t[0]))
        want = _bfs_len(g, start, goal)
        if want is None:
            continue
        path = astar(OccupancyGrid(g), start, goal)
        solved += 1
        astar_ok += path is not None and len(path) - 1 == want

    median_ok = 0
    for _ in range(500):
        n = int(rng.integers(1, 16))
        samples = [(float(rng.uniform(-0.8, 0.8)), float(rng.uniform(-0.4, 0.4)), float(rng.uniform(0.2, 3.0)))
                   for _ in range(n)]
        pose = (float(rng.uniform(0, 8)), float(rng.uniform(0, 8)), float(rng.uniform(-math.pi, math.pi)))
        got = localize(Detection("o", "object", "cup", (0, 0), samples), pose)
        pts = [project_sample(s, pose) for s in samples]
        median_ok += all(got[a] == _oracle_median([p[a] for p in pts]) for a in range(3))

    topk_ok = 0
    for _ in range(200):
        n = int(rng.integers(1, 30))
        cells = rng.choice(400, n, replace=False)
        vals = rng.choice([0.1, 0.25, 0.5, 0.75, 1.0, 1.5], n)
        fs = [Frontier((int(c % 20), int(c // 20)), float(v)) for c, v in zip(cells, vals)]
        k, d_min = int(rng.integers(1, 5)), float(rng.uniform(0, 6))
        got = [(f.value, f.cell[0], f.cell[1]) for f in select_topk_diverse(fs, k, d_min)]
        topk_ok += got == _oracle_topk([(f.value, f.cell[0], f.cell[1]) for f in fs], k, d_min)
    elapsed = time.perf_counter() - t0

    ok = astar_ok == 200 and median_ok == 500 and topk_ok == 200 and elapsed < 10
    verdict(capsys, 1, "oracle equivalence", ok,
            f"A* {astar_ok}/200, median {median_ok}/500, top-k {topk_ok}/200, {elapsed:.2f}s (<10s)")


# -- 2 --------------------------------------------------------------------------

def test_criterion_2_metric_formulas(capsys):
    forced = [
        compute_spl(True, 7.0, 7.0) == 1.0,
        compute_spl(True, 14.0, 7.0) == 0.5,
        compute_spl(False, 7.0, 7.0) == 0.0,
        compute_pspl([SubgoalOutcome(True, 9.0, 6.0)]) == compute_spl(True, 9.0, 6.0),
        compute_pspl([SubgoalOutcome(False, 2.0, 6.0)]) == compute_spl(False, 2.0, 6.0),
    ]
    rng = random.Random(2)
    results = []
    for _ in range(1000):
        outs = [SubgoalOutcome(rng.random() < 0.6, rng.uniform(0, 50), rng.uniform(0.25, 25))
                for _ in range(rng.randint(1, 3))]
        results.append(EpisodeResult(outs, sum(o.agent_path_len for o in outs) * rng.uniform(0.7, 1.3),
                                     rng.randint(1, 1500)))
    violations = 0
    for k in range(0, 1000, 5):
        s = aggregate(results[k:k + 5])
        violations += not (s.sr <= s.psr + EPS and s.spl <= s.sr + EPS and s.pspl <= s.psr + EPS)
    s = aggregate(results)
    violations += not (s.sr <= s.psr and s.spl <= s.sr and s.pspl <= s.psr)
    ok = all(forced) and violations == 0
    verdict(capsys, 2, "metric formulas", ok,
            f"forced cases {sum(forced)}/{len(forced)}, inequality violations {violations} over 1000 results")


# -- 3 --------------------------------------------------------------------------

def test_criterion_3_determinism_and_fairness(capsys, suite_files, tmp_path):
    data = json.loads(Path(suite_files[0]).read_text())
    identical = 0
    for v in VARIANTS:
        r1, t1, _ = run(data, v, seed=11)
        r2, t2, _ = run(data, v, seed=11)
        identical += trace_text(t1, r1) == trace_text(t2, r2)

    spec = SuiteSpec(suite_files[:3], ABLATION, seeds=[5, 6])
    run_suite(spec, CFG, tmp_path / "a")
    res = run_suite(spec, CFG, tmp_path / "b")
    same_summary = (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    hashes_ok = True
    for row in res.rows:
        d = json.loads(Path(next(p for p in suite_files[:3] if Path(p).stem == row.scenario)).read_text())
        want = input_hash(world_to_dict(world_from_dict(d)), d["instructions"][row.instruction], row.seed)
        cell = f"{row.scenario}#{row.instruction}#{row.seed}"
        hashes_ok &= row.input_hash == want == summary["inputs"][cell]
    ok = identical == len(VARIANTS) and same_summary and hashes_ok and len(summary["inputs"]) == 3 * 3 * 2
    verdict(capsys, 3, "determinism and fairness", ok,
            f"byte-identical traces {identical}/{len(VARIANTS)}, identical summary {same_summary}, "
            f"hash-verified cells {len(summary['inputs'])} ok={hashes_ok}")


# -- 4 --------------------------------------------------------------------------

def _first_visible_tick(data, trace, appear_tick):
    """Independent check: robot pose vs. the added object's spot, plain cone + range (no walls here)."""
    spec = next(e["effect"]["spec"] for e in data["events"] if e["effect"]["type"] == "add_object")
    half = math.radians(CFG.fov_deg) / 2
    for r in trace:
        if r["tick"] < appear_tick or r["kind"] not in ("motion", "manipulation"):
            continue
        x, y, h = r["pose"]
        dist = math.hypot(spec["x"] - x, spec["y"] - y)
        bearing = (math.atan2(spec["y"] - y, spec["x"] - x) - h + math.pi) % (2 * math.pi) - math.pi
        if dist <= CFG.max_range and abs(bearing) <= half:
            return r["tick"]
    return None


def _decisions(ep):
    return [(h.action, h.target) for h in ep.memory.history.entries if h.outcome == "started"]


def test_criterion_4_reactivity_and_coordination(capsys, ablation, baselines):
    bound = CFG.clip_window + CFG.resolve_after
    react_ok, delays = 0, []
    for seed in range(20):
        data = en_route_scenario(seed)
        _, trace, _ = run(data, "binder")
        appear = next(r["tick"] for r in trace for e in r.get("events", []) if e["effect"] == "add_object")
        seen = _first_visible_tick(data, trace, appear)
        replan = next((r["tick"] for r in trace
                       if r["mode"] == "REPLAN" and r.get("cause") == ["target_appeared", "apple"]), None)
        if seen is not None and replan is not None:
            delays.append(replan - seen)
            react_ok += 0 <= replan - seen <= bound

    same = 0
    for seed in range(20):
        data = static_visible_scenario(seed)
        _, tb, eb = run(data, "binder")
        _, td, ed = run(data, "drm_only")
        path = lambda tr: [tuple(r["pose"][:2]) for r in tr if r["kind"] == "motion"]
        same += _decisions(eb) == _decisions(ed) and path(tb) == path(td)

    stray, records = 0, 0
    dirs = [ablation[2], baselines[1]]
    for d in dirs:
        for f in sorted((d / "traces").iterdir()):
            with open(f, encoding="utf-8") as fh:
                for line in fh:
                    rec = json.loads(line)
                    if rec.get("kind") == "summary":
                        continue
                    records += 1
                    stray += rec["mode"] == "ADJUST" and rec["phase"] not in ("grasp", "place")
    ok = react_ok == 20 and same == 20 and stray == 0
    verdict(capsys, 4, "reactivity and coordination", ok,
            f"(a) REPLAN within {bound} ticks {react_ok}/20 (delays {sorted(set(delays))}); "
            f"(b) identical binder/drm_only decisions {same}/20; "
            f"(c) ADJUST outside grasp/place {stray} in {records} records")


# -- 5 --------------------------------------------------------------------------

def test_criterion_5_ablation_ordering(capsys, ablation):
    res, elapsed, _ = ablation
    sr = {v: res.summaries[(v, 3)].sr for v in ABLATION}
    n = {v: res.summaries[(v, 3)].n for v in ABLATION}
    gaps = [sr[a] - sr[b] for a, b in zip(ABLATION, ABLATION[1:])]
    ok = all(g >= GAP - EPS for g in gaps) and all(k == N_SUITE for k in n.values()) and elapsed < 300
    verdict(capsys, 5, "ablation SR ordering", ok,
            ", ".join(f"{v} {sr[v]:.2f}" for v in ABLATION) + f" (n={N_SUITE} each, {elapsed:.0f}s < 300s)")


# -- 6 --------------------------------------------------------------------------

def test_criterion_6_baseline_ordering(capsys, baselines):
    res, _ = baselines
    s = res.summaries
    lines, ok = [], True
    for size in (1, 2, 3):
        b = s[("binder", size)]
        for v in BASELINES:
            o = s[(v, size)]
            ok &= b.sr - o.sr >= GAP - EPS and b.spl - o.spl >= GAP - EPS
        lines.append(f"n={size} SR " + "/".join(f"{s[(v, size)].sr:.2f}" for v in ["binder"] + BASELINES)
                     + " SPL " + "/".join(f"{s[(v, size)].spl:.2f}" for v in ["binder"] + BASELINES))
    drop = {v: s[(v, 1)].sr - s[(v, 3)].sr for v in ["binder"] + BASELINES}
    for v in BASELINES:
        ok &= drop[v] - drop["binder"] >= GAP - EPS
    lines.append("SR drop 1->3 " + ", ".join(f"{v} {drop[v]:+.2f}" for v in drop))
    verdict(capsys, 6, "baseline ordering (binder/sparse/waypoint)", ok, "; ".join(lines))


# -- 7 --------------------------------------------------------------------------

def test_criterion_7_efficiency(capsys, baselines):
    res, _ = baselines
    s = res.summaries
    ok, parts = True, []
    for size in (1, 2, 3):
        b, w = s[("binder", size)], s[("waypoint_update", size)]
        if math.isnan(w.avg_path_len) or math.isnan(b.avg_path_len):
            ok = False
            parts.append(f"n={size} no successes to compare")
            continue
        ratio = w.avg_path_len / b.avg_path_len
        ok &= ratio >= 1.2 and b.avg_ticks < w.avg_ticks
        parts.append(f"n={size} path ratio {ratio:.2f} (>=1.2), ticks {b.avg_ticks:.0f} vs {w.avg_ticks:.0f}")
    verdict(capsys, 7, "efficiency vs waypoint_update", ok, "; ".join(parts))


# -- 8 --------------------------------------------------------------------------

def _diverted(ep):
    return any(h.action == "replan" and h.target == ("target_appeared", "apple") for h in ep.memory.history.entries)


def _passed_by(ep, appear_tick):
    """The leg active when the object appeared ran to its end before any grasp was tried."""
    for h in ep.memory.history.entries:
        if h.tick < appear_tick:
            continue
        if h.action == "grasp":
            return False
        if h.action == "look_around":
            return h.target == "arrival"
    return True


def test_criterion_8_mechanisms(capsys):
    en_ok = 0
    for seed in range(50):
        data = en_route_scenario(seed)
        rb, tb, eb = run(data, "binder")
        _, _, es = run(data, "sparse_update")
        appear = next(r["tick"] for r in tb for e in r.get("events", []) if e["effect"] == "add_object")
        en_ok += rb.success and _diverted(eb) and not _diverted(es) and _passed_by(es, appear)

    disp_ok = 0
    for seed in range(50):
        data = displaced_grasp_scenario(seed)
        rb, _, _ = run(data, "binder")
        rn, _, _ = run(data, "neither")
        disp_ok += rb.success and 1 <= rb.counts.get("adjust", 0) <= CFG.max_adjust and not rn.success

    with_m, without = [], []
    for seed in range(100):
        data = tabletop_scenario(seed)
        with_m.append(run(data, "binder")[0])
        without.append(run(data, "drm_only")[0])
    sr_gain = aggregate(with_m).sr - aggregate(without).sr
    overhead = np.mean([r.total_ticks for r in with_m]) / np.mean([r.total_ticks for r in without]) - 1

    ok = en_ok / 50 >= 0.95 and disp_ok / 50 >= 0.95 and sr_gain >= 0.15 - EPS and overhead <= 0.15
    verdict(capsys, 8, "mechanism scenarios", ok,
            f"(a) en-route {en_ok}/50; (b) displaced grasp {disp_ok}/50; "
            f"tabletop SR gain {sr_gain:+.2f} (>=0.15), tick overhead {overhead:+.1%} (<=15%)")
