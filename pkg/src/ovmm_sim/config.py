"""Tunable parameters shared by every module.

All defaults live here so a single JSON file (``--config``) can override any
of them for a run or a suite.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class SimConfig:
    # sensing
    fov_deg: float = 90.0
    max_range: float = 3.0
    view_range: float = 5.0
    panorama_views: int = 8
    # wrist camera used while grasping/placing
    manip_fov_deg: float = 360.0

    # memory
    merge_radius: float = 0.5

    # exploration
    tau: float = 200.0
    d_min: float = 1.5
    top_k: int = 3
    semantic_radius: float = 1.5
    free_area_weight: float = 0.1
    # frontiers within this path distance are preferred over farther ones
    explore_horizon: float = 5.0

    # irm
    clip_window: int = 8
    theta_match: float = 0.35
    shift_tol: float = 0.2
    reroute_tol: float = 0.5
    resolve_after: int = 2
    generic_slots: int = 2

    # executor
    reconstruct_ticks: int = 20
    grasp_ticks: int = 6
    place_ticks: int = 4
    adjust_ticks: int = 2
    max_adjust: int = 2
    max_replans: int = 3
    max_grasp_attempts: int = 2
    approach_dist: float = 0.4
    waypoint_interval: float = 1.5
    max_ticks_base: int = 400
    max_ticks_per_subgoal: int = 300
    monitor_tick_cost: int = 0
    external_timeout: float = 2.0

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "SimConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


DEFAULT_CONFIG = SimConfig()
