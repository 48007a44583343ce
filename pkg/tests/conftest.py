import pytest

from ovmm_sim.world import world_from_dict


def scene(width=20, height=20, cell_size=0.25, robot=(0.0, 0.0, 0.0), obstacles=(), objects=(), receptacles=(),
          events=(), outcome=None, sensor=None, seed=0, instructions=None, name="test"):
    data = {
        "name": name,
        "width": width,
        "height": height,
        "cell_size": cell_size,
        "seed": seed,
        "robot": {"x": robot[0], "y": robot[1], "heading": robot[2]},
        "obstacles": [list(c) for c in obstacles],
        "objects": [dict(o) for o in objects],
        "receptacles": [dict(r) for r in receptacles],
        "events": [dict(e) for e in events],
    }
    if outcome:
        data["outcome"] = dict(outcome)
    if sensor:
        data["sensor"] = dict(sensor)
    if instructions is not None:
        data["instructions"] = instructions
    return data


def make_world(**kw):
    return world_from_dict(scene(**kw))


@pytest.fixture
def scene_dict():
    return scene
