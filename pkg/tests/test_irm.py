import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovmm_sim.config import DEFAULT_CONFIG
from ovmm_sim.drm import GuidancePrompt
from ovmm_sim.irm import (
    ADJUST,
    CONTINUE,
    MODES,
    REPLAN,
    Clip,
    Flag,
    MonitorReport,
    NoFreshDetection,
    local_grasp_recompute,
    monitor,
    parse,
)
from ovmm_sim.localization import LocalizationQueue, LocalizationRequest, NoSamples, localize, project_sample
from ovmm_sim.memory import ObjectRegistry, RegistryRecord
from ovmm_sim.world import Detection, Observation

POSE = (0.0, 0.0, 0.0)


def sample_for(x, y, z=0.5, pose=POSE):
    """Inverse of the camera projection for a robot at ``pose``."""
    dx, dy = x - pose[0], y - pose[1]
    ground = math.hypot(dx, dy)
    return (math.atan2(dy, dx) - pose[2], math.atan2(z, ground), math.hypot(ground, z))


def det(category, x, y, kind="object", available=True, oid=None):
    s = sample_for(x, y)
    return Detection(oid or category, kind, category, (s[0], s[0]), [s], available)


def frame(tick, *dets, alignment=None):
    return Observation(tick, POSE, list(dets), alignment_error=alignment)


def clip_of(*frames):
    c = Clip(8)
    for f in frames:
        c.append(f)
    return c


def guide(phase, watch, checks, expected=(), replan=()):
    return GuidancePrompt(phase, tuple(watch), frozenset(checks), tuple(expected), frozenset(replan))


# -- localisation -----------------------------------------------------------

def _oracle_median(values):
    s = sorted(values)
    n = len(s)
    return s[n // 2] if n % 2 else 0.5 * (s[n // 2 - 1] + s[n // 2])


def test_median_localization_matches_sort_oracle():
    rng = np.random.default_rng(11)
    for _ in range(500):
        n = int(rng.integers(1, 12))
        samples = [(float(rng.uniform(-1, 1)), float(rng.uniform(-0.5, 0.5)), float(rng.uniform(0.2, 3)))
                   for _ in range(n)]
        pose = (float(rng.uniform(0, 5)), float(rng.uniform(0, 5)), float(rng.uniform(-math.pi, math.pi)))
        got = localize(Detection("o", "object", "cup", (0, 0), samples), pose)
        pts = [project_sample(s, pose) for s in samples]
        for axis in range(3):
            assert got[axis] == _oracle_median([p[axis] for p in pts])


def test_project_sample_round_trip():
    x, y, z = project_sample(sample_for(1.5, -0.7, 0.4), POSE)
    assert (x, y, z) == pytest.approx((1.5, -0.7, 0.4))


def test_localize_without_samples_raises():
    with pytest.raises(NoSamples):
        localize(Detection("o", "object", "cup", (0, 0), []), POSE)


def test_queue_resolves_only_when_due():
    q = LocalizationQueue()
    d = det("cup", 1.0, 0.0)
    q.submit(LocalizationRequest("cup", "object", d, POSE, 5, 7))
    assert q.due(6) == []
    ready = q.due(7)
    assert len(ready) == 1 and ready[0].result[0] == pytest.approx(1.0)
    assert q.pending == [] and q.resolved_count == 1


# -- clip -------------------------------------------------------------------

def test_clip_keeps_last_window_frames():
    c = Clip(3)
    for t in range(5):
        c.append(frame(t))
    assert len(c) == 3 and [f.tick for f, _ in c.frames] == [2, 3, 4] and c.last.tick == 4
    c.clear()
    assert len(c) == 0 and c.last is None
    with pytest.raises(ValueError):
        Clip(0)


def test_local_grasp_uses_freshest_sighting():
    c = clip_of(frame(1, det("cup", 1.0, 0.0)), frame(2, det("cup", 1.2, 0.1)), frame(3))
    assert local_grasp_recompute(c, "cup")[:2] == pytest.approx((1.2, 0.1))
    with pytest.raises(NoFreshDetection):
        local_grasp_recompute(c, "plate")


# -- monitor + parse --------------------------------------------------------

def test_empty_clip_reports_nothing():
    rep = monitor(Clip(), guide("explore", ["cup"], {"target_shift"}))
    assert rep.mentions == [] and rep.anomaly_flags == []


def test_new_watched_target_triggers_replan_once_unregistered():
    g = guide("explore", ["cup"], {"target_shift"}, replan=["cup"])
    rep = monitor(clip_of(frame(1, det("cup", 1.0, 0.5))), g)
    assert [f.name for f in rep.anomaly_flags] == ["target_appeared"]
    reg = ObjectRegistry()
    out = parse(rep, g, reg)
    assert out.mode == REPLAN and out.cause == ("target_appeared", "cup")
    assert [e.mention.entity for e in out.detections] == ["cup"]
    # already registered at that spot: nothing to replan for
    reg.records["r1"] = RegistryRecord("r1", "cup", "object", (1.0, 0.5, 0.5), 0, "irm_detection")
    assert parse(rep, g, reg).mode == CONTINUE


def test_unwatched_categories_are_not_mentioned():
    rep = monitor(clip_of(frame(1, det("sofa", 1.0, 0.0))), guide("explore", ["cup"], {"target_shift"}))
    assert rep.mentions == []


@pytest.mark.parametrize("phase,shift,mode", [
    ("grasp", 0.3, ADJUST),
    ("navigate", 0.3, CONTINUE),
    ("navigate", 0.8, REPLAN),
    ("grasp", 0.1, CONTINUE),
])
def test_shift_mode_depends_on_phase(phase, shift, mode):
    g = guide(phase, ["cup"], {"target_shift"}, expected=[("cup", "r1", (1.0, 0.0))])
    rep = monitor(clip_of(frame(1, det("cup", 1.0 + shift, 0.0))), g)
    assert parse(rep, g, ObjectRegistry()).mode == mode
    if mode != CONTINUE:
        assert rep.anomaly_flags[0].record_id == "r1"
        assert rep.anomaly_flags[0].magnitude == pytest.approx(shift)


def test_misalignment_flag_only_with_alignment_check():
    f = frame(1, det("cup", 1.0, 0.0), alignment=0.2)
    g = guide("grasp", ["cup"], {"alignment"}, expected=[("cup", "r1", (1.0, 0.0))])
    rep = monitor(clip_of(f), g)
    assert [x.name for x in rep.anomaly_flags] == ["misalignment"]
    assert parse(rep, g, ObjectRegistry()).mode == ADJUST
    assert monitor(clip_of(f), guide("grasp", ["cup"], {"target_shift"},
                                     expected=[("cup", "r1", (1.0, 0.0))])).anomaly_flags == []


def test_unavailable_receptacle_means_replan():
    g = guide("place", ["table"], {"availability"}, expected=[("table", "r2", (1.0, 0.0))])
    rep = monitor(clip_of(frame(1, det("table", 1.0, 0.0, kind="receptacle", available=False))), g)
    assert parse(rep, g, ObjectRegistry()).mode == REPLAN


def test_receptacle_missing_from_expected_spot_is_unavailable():
    g = guide("place", ["table"], {"availability"}, expected=[("table", "r2", (1.0, 0.0))])
    f = frame(1)
    f.expected_in_view = {"r2": True}
    rep = monitor(clip_of(f), g)
    assert [x.name for x in rep.anomaly_flags] == ["receptacle_unavailable"]
    f.expected_in_view = {"r2": False}
    assert monitor(clip_of(f), g).anomaly_flags == []


def test_no_checks_means_continue():
    g = guide("navigate", ["cup"], set())
    rep = MonitorReport(1, "navigate", anomaly_flags=[Flag("object_shifted", "cup", 5.0)])
    assert parse(rep, g, ObjectRegistry()).mode == CONTINUE


def test_generic_guidance_caps_mentions_by_salience():
    g = GuidancePrompt("navigate", (), frozenset({"target_shift"}), generic=True)
    rep = monitor(clip_of(frame(1, det("cup", 2.0, 0.0), det("sofa", 0.5, 0.0), det("lamp", 1.0, 0.0))), g)
    assert [m.category for m in rep.mentions] == ["sofa", "lamp"]


flag_names = st.sampled_from(["target_appeared", "object_shifted", "misalignment", "receptacle_unavailable",
                              "grasp_slipping"])
flags = st.lists(st.builds(Flag, flag_names, st.sampled_from(["cup", None]), st.floats(0, 3)), max_size=5)


@settings(max_examples=300)
@given(st.sampled_from(["explore", "navigate", "grasp", "place"]), flags)
def test_parse_is_total_and_adjust_only_while_manipulating(phase, fl):
    g = guide(phase, ["cup"], {"target_shift", "availability", "alignment"}, replan=["cup"])
    out = parse(MonitorReport(1, phase, anomaly_flags=fl), g, ObjectRegistry(), DEFAULT_CONFIG)
    assert out.mode in MODES
    if phase not in ("grasp", "place"):
        assert out.mode != ADJUST
    if not fl:
        assert out.mode == CONTINUE and out.cause is None
