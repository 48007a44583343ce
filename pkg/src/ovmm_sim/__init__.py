"""Deterministic simulator for mobile pick-and-place in scenes that change while the robot works."""

from .config import DEFAULT_CONFIG, SimConfig
from .drm import TaskInstruction, parse_instruction
from .executor import VARIANTS, run_episode
from .metrics import EpisodeResult, MetricsSummary, aggregate, compute_pspl, compute_spl
from .scenarios import generate_scenario, generate_suite
from .world import load_scenario, world_from_dict

__all__ = [
    "DEFAULT_CONFIG", "SimConfig", "TaskInstruction", "parse_instruction", "VARIANTS", "run_episode",
    "EpisodeResult", "MetricsSummary", "aggregate", "compute_pspl", "compute_spl", "generate_scenario",
    "generate_suite", "load_scenario", "world_from_dict",
]
