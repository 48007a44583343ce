"""Optional out-of-process scorer and monitor, spoken to over newline-delimited JSON.

Each request is one JSON object on the child's stdin carrying an ``id``; the
child answers with one JSON object on stdout echoing that ``id``. Anything
late, malformed or mismatched is ignored and the built-in rule answer is used.
"""

from __future__ import annotations

import json
import os
import selectors
import subprocess
import time

from .config import DEFAULT_CONFIG, SimConfig
from .drm import GuidancePrompt
from .irm import Clip, Flag, MonitorReport, monitor


class ChildProcess:
    def __init__(self, argv: list[str], timeout: float = 2.0):
        self.argv = list(argv)
        self.timeout = timeout
        self.proc = subprocess.Popen(self.argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                     stderr=subprocess.DEVNULL)
        self._buf = b""
        self._next_id = 0
        self.fallbacks = 0

    def _readline(self, deadline: float) -> bytes | None:
        sel = selectors.DefaultSelector()
        sel.register(self.proc.stdout, selectors.EVENT_READ)
        try:
            while b"\n" not in self._buf:
                left = deadline - time.monotonic()
                if left <= 0 or not sel.select(left):
                    return None
                chunk = os.read(self.proc.stdout.fileno(), 65536)
                if not chunk:
                    return None
                self._buf += chunk
        finally:
            sel.close()
        line, _, self._buf = self._buf.partition(b"\n")
        return line

    def request(self, payload: dict) -> dict | None:
        """Send one request; ``None`` on timeout, crash or garbage."""
        if self.proc.poll() is not None:
            self.fallbacks += 1
            return None
        rid = self._next_id
        self._next_id += 1
        try:
            self.proc.stdin.write((json.dumps({"id": rid, **payload}) + "\n").encode("utf-8"))
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError):
            self.fallbacks += 1
            return None
        deadline = time.monotonic() + self.timeout
        while True:
            line = self._readline(deadline)
            if line is None:
                self.fallbacks += 1
                return None
            try:
                reply = json.loads(line)
            except json.JSONDecodeError:
                continue
            # stale answers to requests that already timed out are skipped
            if isinstance(reply, dict) and reply.get("id") == rid:
                return reply

    def close(self) -> None:
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=1.0)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def registry_digest(memory) -> list[dict]:
    return [{"id": r.id, "category": r.category, "kind": r.kind,
             "position": [round(float(v), 3) for v in r.position[:2]], "stale": r.stale}
            for r in memory.registry.records.values()]


class ExternalScorer:
    """Frontier scorer backed by a child process. Returns ``None`` to fall back to the rule."""

    def __init__(self, argv: list[str], timeout: float = 2.0, instruction: str = ""):
        self.child = ChildProcess(argv, timeout)
        self.instruction = instruction
        self.memory = None

    def bind(self, memory, instruction: str | None = None) -> None:
        self.memory = memory
        if instruction is not None:
            self.instruction = instruction

    def __call__(self, views, frontiers, watch) -> int | None:
        payload = {
            "type": "score_frontiers",
            "instruction": self.instruction,
            "watch": list(watch),
            "views": [{"cell": list(v.cell), "heading": round(v.heading, 4), "categories": v.categories,
                       "free_fraction": round(v.free_fraction, 4)} for v in views],
            "registry": registry_digest(self.memory) if self.memory is not None else [],
        }
        reply = self.child.request(payload)
        if reply is None:
            return None
        idx = reply.get("candidate_index")
        if isinstance(idx, int) and not isinstance(idx, bool) and 0 <= idx < len(frontiers):
            return idx
        self.child.fallbacks += 1
        return None

    def close(self) -> None:
        self.child.close()


def clip_digest(clip: Clip, guidance: GuidancePrompt) -> dict:
    frames = []
    for obs, positions in clip.frames:
        frames.append({
            "tick": obs.tick,
            "pose": [round(float(v), 4) for v in obs.pose],
            "alignment_error": obs.alignment_error,
            "detections": [{"category": d.category, "kind": d.kind, "available": d.available,
                            "position": [round(float(v), 4) for v in p]}
                           for d, p in zip(obs.detections, positions)],
        })
    return {
        "phase": guidance.phase,
        "watch": list(guidance.watch_entities),
        "checks": sorted(guidance.anomaly_checks),
        "expected": [[e, rid, list(pos)] for e, rid, pos in guidance.expected],
        "generic": guidance.generic,
        "frames": frames,
    }


_FLAG_NAMES = {"target_appeared", "object_shifted", "misalignment", "receptacle_unavailable", "grasp_slipping"}


class ExternalMonitor:
    """Monitor hook with the executor's ``monitor`` signature.

    The rule monitor always runs first so its mentions (which carry the
    detections needed for localisation) are reused; the child only gets to
    replace the anomaly flags and text. Every evaluation is appended to ``log``.
    """

    def __init__(self, argv: list[str], timeout: float = 2.0):
        self.child = ChildProcess(argv, timeout)
        self.log: list[dict] = []

    def __call__(self, clip: Clip, guidance: GuidancePrompt, cfg: SimConfig = DEFAULT_CONFIG,
                 align_tol: float = 0.05) -> MonitorReport:
        report = monitor(clip, guidance, cfg, align_tol)
        reply = self.child.request({"type": "monitor", **clip_digest(clip, guidance)})
        source = "rule"
        if reply is not None:
            flags = _parse_flags(reply.get("anomaly_flags"))
            if flags is not None:
                report.anomaly_flags = flags
                report.text = str(reply.get("text", report.text))
                source = "external"
            else:
                self.child.fallbacks += 1
        self.log.append({"tick": report.tick, "phase": report.phase, "source": source, "text": report.text,
                         "flags": [f.name for f in report.anomaly_flags]})
        return report

    def close(self) -> None:
        self.child.close()


def _parse_flags(raw) -> list[Flag] | None:
    if not isinstance(raw, list):
        return None
    out = []
    for item in raw:
        if not isinstance(item, dict) or item.get("name") not in _FLAG_NAMES:
            return None
        pos = item.get("position")
        out.append(Flag(item["name"], item.get("entity"), float(item.get("magnitude", 0.0)),
                        item.get("record_id"), tuple(pos) if pos is not None else None))
    return out
