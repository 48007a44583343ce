"""Median RGB-D projection and the delayed-tick localization queue."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .world import Detection


class NoSamples(ValueError):
    pass


def project_sample(sample, pose) -> tuple[float, float, float]:
    """Camera-frame (bearing, elevation, range) to a world point."""
    u, v, d = sample
    x, y, heading = pose
    ground = d * math.cos(v)
    return (x + ground * math.cos(heading + u), y + ground * math.sin(heading + u), d * math.sin(v))


def localize(detection: Detection, pose) -> np.ndarray:
    """Component-wise median of the projected range samples."""
    if not detection.range_samples:
        raise NoSamples(detection.category)
    pts = np.array([project_sample(s, pose) for s in detection.range_samples])
    return np.median(pts, axis=0)


@dataclass
class LocalizationRequest:
    category: str
    kind: str
    detection: Detection
    pose: tuple[float, float, float]
    requested_tick: int
    resolve_at: int
    record_hint: str | None = None
    result: np.ndarray | None = None


@dataclass
class LocalizationQueue:
    """Requests resolve once their tick arrives; motion never waits on them."""

    pending: list[LocalizationRequest] = field(default_factory=list)
    resolved_count: int = 0

    def submit(self, req: LocalizationRequest) -> None:
        self.pending.append(req)

    def due(self, tick: int) -> list[LocalizationRequest]:
        ready = [r for r in self.pending if r.resolve_at <= tick]
        if not ready:
            return []
        self.pending = [r for r in self.pending if r.resolve_at > tick]
        for r in ready:
            r.result = localize(r.detection, r.pose)
        self.resolved_count += len(ready)
        return ready
