"""Shared synthetic scenes.

Base scene: 8 x 6 x 3 m room, sensor at (1, 3, 1.2) facing +x with an
80 x 50 degree scan FOV and a 63 x 50 degree camera (320x240). The walking
object is a cylinder (r 0.3, h 1.4) spanning z in [0.5, 1.9] on a lateral
path x = 3.2, y in [2.2, 3.8]: fully inside the camera FOV along the whole
path (tangent azimuth 27.4 < 31.6 degrees), the floor out of view at that
range so proximity relabeling cannot touch static structure, and no flat
grazing faces whose scan columns could outrun the cluster tolerance.
"""

import pytest

from dynamap.config import PipelineConfig
from dynamap.simulator import scene_from_dict


def scene_dict(n_frames=10, seed=0, points_per_scan=6000, noise=0.0,
               moving=True, trajectory=None, degradation=None, speed=0.8,
               object_x=3.2):
    d = {
        "room": {"size": [8.0, 6.0, 3.0]},
        "obstacles": [
            {"shape": "box", "center": [5.5, 1.2, 0.5],
             "size": [1.0, 1.0, 1.0], "color": [80, 120, 200]},
            {"shape": "box", "center": [5.0, 4.8, 0.75],
             "size": [0.8, 0.6, 1.5], "color": [90, 200, 120]},
            {"shape": "cylinder", "center": [6.5, 3.0, 1.0],
             "radius": 0.3, "height": 2.0, "color": [220, 220, 90]},
        ],
        "moving_objects": [],
        "sensor": {"points_per_scan": points_per_scan, "fov_h_deg": 80.0,
                   "fov_v_deg": 50.0, "range_noise_std": noise,
                   "min_range": 0.05},
        "camera": {"width": 320, "height": 240, "fx": 260.0, "fy": 260.0,
                   "cx": 160.0, "cy": 120.0},
        "trajectory": trajectory or {"position": [1.0, 3.0, 1.2], "yaw_deg": 0.0},
        "frame_rate": 10.0,
        "n_frames": n_frames,
        "seed": seed,
    }
    if moving:
        d["moving_objects"].append({
            "shape": "cylinder", "size": [0.3, 1.4], "class_name": "person",
            "class_id": 1, "color": [220, 60, 60],
            "waypoints": [[object_x, 2.2, 1.2], [object_x, 3.8, 1.2]],
            "speed": speed})
    if degradation:
        d["degradation"] = degradation
    return d


def make_scene(**kwargs):
    return scene_from_dict(scene_dict(**kwargs))


@pytest.fixture(scope="session")
def static_scene_frames():
    """Noiseless static room, stationary sensor, one frame."""
    from dynamap.simulator import generate_sequence
    return generate_sequence(make_scene(n_frames=1, moving=False))


@pytest.fixture(scope="session")
def moving_scene_frames():
    """Noiseless scene with the walking box, stationary sensor, 8 frames."""
    from dynamap.simulator import generate_sequence
    return generate_sequence(make_scene(n_frames=8))


def default_config(**overrides):
    cfg = PipelineConfig(**overrides)
    return cfg
