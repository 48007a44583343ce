"""Command line entry point: run, suite, gen, report, replay."""

from __future__ import annotations

import argparse
import json
import shlex
import sys
from pathlib import Path

from .config import DEFAULT_CONFIG, SimConfig
from .drm import TaskInstruction, parse_instruction
from .executor import FAILURE_CLASSES, VARIANTS, run_episode
from .metrics import Unreachable
from .report import format_table, write_report
from .scenarios import TEMPLATES, generate_scenario
from .suite import (
    FairnessError,
    ReplayMismatch,
    SuiteSpec,
    atomic_write,
    read_trace,
    replay,
    run_suite,
    summaries_from_file,
    trace_text,
)
from .world import InvalidScenario, load_scenario, world_from_dict

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_REPLAY = 0, 2, 3, 4
# stage k, class i -> 10*(k+1) + i, e.g. navigation.collision_stop = 10, placing.misaligned = 30
EXIT_CODES = {f"{stage}.{name}": 10 * (k + 1) + i
              for k, (stage, names) in enumerate(FAILURE_CLASSES.items()) for i, name in enumerate(names)}


def exit_code_for(failure_class: str | None) -> int:
    if failure_class is None:
        return EXIT_OK
    return EXIT_CODES[failure_class]


def _config(path: str | None) -> SimConfig:
    return SimConfig.load(path) if path else DEFAULT_CONFIG


def _instruction(data: dict, arg: str | None) -> TaskInstruction:
    instrs = data.get("instructions", [])
    if arg is None or arg.isdigit():
        k = int(arg or 0)
        if not 0 <= k < len(instrs):
            raise InvalidScenario(f"instruction index {k} out of range ({len(instrs)} available)")
        return TaskInstruction.from_dict(instrs[k])
    try:
        return parse_instruction(arg)
    except ValueError as exc:
        raise InvalidScenario(str(exc)) from exc


def cmd_run(args) -> int:
    cfg = _config(args.config)
    data = load_scenario(args.scenario)
    world = world_from_dict(data, args.scenario)
    task = _instruction(data, args.instruction)
    scorer = monitor_hook = None
    try:
        if args.scorer_cmd:
            from .external import ExternalScorer
            scorer = ExternalScorer(shlex.split(args.scorer_cmd), cfg.external_timeout, task.text)
        if args.monitor_cmd:
            from .external import ExternalMonitor
            monitor_hook = ExternalMonitor(shlex.split(args.monitor_cmd), cfg.external_timeout)
        result, trace, _ = run_episode(world, task, args.variant, cfg, seed=args.seed,
                                       scenario=data.get("name", Path(args.scenario).stem),
                                       scorer=scorer, monitor_hook=monitor_hook)
    finally:
        for hook in (scorer, monitor_hook):
            if hook is not None:
                hook.close()
    if args.out:
        atomic_write(args.out, trace_text(trace, result))
    print(json.dumps(result.to_dict(), sort_keys=True))
    return exit_code_for(result.failure_class)


def cmd_suite(args) -> int:
    cfg = _config(args.config)
    if args.spec:
        spec = SuiteSpec.load(args.spec)
    else:
        if not args.scenario:
            print("suite needs --spec or at least one --scenario", file=sys.stderr)
            return EXIT_USAGE
        spec = SuiteSpec(args.scenario, args.variant or list(VARIANTS[:4]), args.seed or None,
                         dynamic=not args.static)
    out = run_suite(spec, cfg, args.out, workers=args.workers)
    sys.stdout.write(format_table(out.summaries))
    return EXIT_OK


def cmd_gen(args) -> int:
    out = Path(args.out)
    for k in range(args.count):
        data = generate_scenario(args.template, args.subgoals, args.seed + k, dynamic=not args.static,
                                  prefixes=args.prefixes)
        path = out / f"{data['name']}.json"
        atomic_write(path, json.dumps(data, indent=1, sort_keys=True) + "\n")
        print(path)
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.summary)
    if src.is_dir():
        src = src / "summary.json"
    summaries, taxonomy = summaries_from_file(src)
    files = write_report(summaries, taxonomy, args.out or src.parent)
    sys.stdout.write(format_table(summaries))
    for f in files:
        print(f)
    return EXIT_OK


def cmd_replay(args) -> int:
    records, summary = read_trace(args.trace)
    rep = replay(records, summary)
    print(json.dumps({"odometry": rep.odometry, "ticks": rep.ticks, "success": rep.success, "spl": rep.spl,
                      "pspl": rep.pspl, "failure_class": rep.failure_class}, sort_keys=True))
    return exit_code_for(rep.failure_class)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ovmm-sim", description="Dynamic-scene mobile manipulation simulator.")
    sub = p.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", help="run one episode")
    r.add_argument("--scenario", required=True)
    r.add_argument("--instruction", help="index into the scenario's instructions, or free text")
    r.add_argument("--variant", default="binder", help=f"one of {', '.join(VARIANTS)} (waypoint_update:<m>)")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="write the per-tick trace (NDJSON) here")
    r.add_argument("--config")
    r.add_argument("--scorer-cmd", help="child process answering frontier-scoring requests")
    r.add_argument("--monitor-cmd", help="child process answering monitor requests")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("suite", help="run a scenario x variant x seed matrix")
    s.add_argument("--spec", help="suite JSON file")
    s.add_argument("--scenario", action="append")
    s.add_argument("--variant", action="append")
    s.add_argument("--seed", type=int, action="append")
    s.add_argument("--static", action="store_true", help="drop scripted events")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_suite)

    g = sub.add_parser("gen", help="generate scenario files")
    g.add_argument("--template", choices=sorted(TEMPLATES), default="office")
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--subgoals", type=int, default=1, choices=(1, 2, 3))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--static", action="store_true")
    g.add_argument("--prefixes", action="store_true", help="also list the shorter task-size prefixes")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    rp = sub.add_parser("report", help="tables and figures from a suite summary")
    rp.add_argument("summary", help="summary.json or the suite output directory")
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)

    rl = sub.add_parser("replay", help="re-derive metrics from a trace and check it")
    rl.add_argument("trace")
    rl.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InvalidScenario, Unreachable, FairnessError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ReplayMismatch as exc:
        print(f"replay mismatch: {exc}", file=sys.stderr)
        return EXIT_REPLAY
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
