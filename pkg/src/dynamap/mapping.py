"""Global map maintenance: the accumulated colored static map (updated on
keyframes, voxel-filtered after every update) and the instantaneous dynamic map
with one axis-aligned box per dynamic object."""

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import (LABEL_DYNAMIC, PointCloud, Pose, concat_clouds,
                       is_dynamic, transform_cloud, voxel_downsample)


class GlobalStaticMap:
    """World-frame colored static map; never holds a dynamically-labeled point
    and never two points in the same voxel."""

    def __init__(self, leaf: float = 0.05):
        if leaf <= 0:
            raise ValueError("leaf must be > 0")
        self.leaf = leaf
        self.cloud = PointCloud(np.zeros((0, 3)), np.zeros((0, 3), np.uint8),
                                np.zeros(0, np.int32))

    def __len__(self) -> int:
        return len(self.cloud)

    def update(self, static_cloud: PointCloud, pose: Pose, keyframe: bool):
        """Insert the (already colored) static points of a keyframe and
        re-filter; a non-keyframe is a no-op."""
        if not keyframe or len(static_cloud) == 0:
            return
        if static_cloud.labels is not None:
            static_cloud = static_cloud.select(~is_dynamic(static_cloud.labels))
        world = transform_cloud(pose, static_cloud)
        merged = concat_clouds(self.cloud, world) if len(self.cloud) else world
        self.cloud = voxel_downsample(merged, self.leaf)


@dataclass
class DynamicObjectBox:
    """Axis-aligned world-frame bounds of one dynamic object in one frame."""

    min_corner: np.ndarray
    max_corner: np.ndarray
    class_id: int
    frame_id: int

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= self.min_corner - tol)
                      & (points <= self.max_corner + tol), axis=1)

    def to_dict(self) -> dict:
        return {"min": [float(v) for v in self.min_corner],
                "max": [float(v) for v in self.max_corner],
                "class_id": int(self.class_id),
                "frame_id": int(self.frame_id)}


@dataclass
class DynamicMapSnapshot:
    """Per-frame dynamic map: replaces the previous frame's snapshot."""

    cloud: PointCloud
    boxes: list = field(default_factory=list)


def update_dynamic_map(dynamic_cloud: PointCloud, pose: Pose,
                       class_of_instance=None) -> DynamicMapSnapshot:
    """Build the frame's dynamic map: the dynamic points in world coordinates
    plus one box per dynamic instance label. ``class_of_instance`` optionally
    maps instance id -> class id (boxes carry -1 when unknown)."""
    world = transform_cloud(pose, dynamic_cloud)
    boxes = []
    if world.labels is not None and len(world):
        inst = world.labels - LABEL_DYNAMIC
        for k in np.unique(inst[inst >= 0]):
            pts = world.positions[inst == k]
            class_id = -1
            if class_of_instance is not None:
                class_id = int(class_of_instance.get(int(k), -1))
            boxes.append(DynamicObjectBox(pts.min(axis=0), pts.max(axis=0),
                                          class_id, world.frame_id))
    return DynamicMapSnapshot(world, boxes)


def write_boxes(path, boxes):
    with open(path, "w") as f:
        json.dump([b.to_dict() for b in boxes], f, indent=1)


def read_boxes(path):
    with open(path) as f:
        data = json.load(f)
    return [DynamicObjectBox(np.asarray(d["min"], dtype=float),
                             np.asarray(d["max"], dtype=float),
                             d["class_id"], d["frame_id"]) for d in data]
