"""Deterministic synthetic data source: a closed room with static primitives
and rigid moving objects, scanned by a LiDAR-like ray-cast sensor with a
co-located pinhole camera producing perfect (or deliberately degraded)
instance masks, plus ground-truth poses and per-point labels.

Identical config + seed gives bit-identical output; per-frame randomness is
derived as ``default_rng([seed, frame_id])``.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import io as cloud_io
from .config import ConfigError, require_keys
from .fusion import CameraModel
from .geometry import LABEL_DYNAMIC, LABEL_STATIC, PointCloud, Pose
from .masks import (InstanceMask, SegmentationResult, erode, save_segmentation,
                    tight_bbox)

# Sensor axes: x forward, y left, z up. Camera axes: x right, y down, z
# forward. The two are co-located.
SENSOR_TO_CAMERA = np.array([[0.0, -1.0, 0.0],
                             [0.0, 0.0, -1.0],
                             [1.0, 0.0, 0.0]])

MISCLASS_CLASS_ID = 0
MISCLASS_CLASS_NAME = "unknown"


@dataclass
class BoxSpec:
    center: np.ndarray
    size: np.ndarray
    color: np.ndarray

    @property
    def lo(self):
        return self.center - self.size / 2.0

    @property
    def hi(self):
        return self.center + self.size / 2.0


@dataclass
class CylinderSpec:
    center: np.ndarray  # center of the axis segment
    radius: float
    height: float
    color: np.ndarray


@dataclass
class MovingObject:
    shape: str  # "box" | "cylinder"
    size: np.ndarray  # box: (sx, sy, sz); cylinder: (radius, height)
    class_name: str
    class_id: int
    color: np.ndarray
    waypoints: np.ndarray  # (K, 3) centers
    speed: float

    def center_at(self, t: float) -> np.ndarray:
        return _polyline_position(self.waypoints, self.speed, t)

    def primitive_at(self, t: float):
        c = self.center_at(t)
        if self.shape == "box":
            return BoxSpec(c, self.size, self.color)
        return CylinderSpec(c, float(self.size[0]), float(self.size[1]), self.color)


@dataclass
class MaskDegradation:
    erosion_radius: int = 0
    truncation_fraction: float = 0.0
    dropout_prob: float = 0.0
    misclass_prob: float = 0.0

    @property
    def is_identity(self) -> bool:
        return (self.erosion_radius == 0 and self.truncation_fraction == 0.0
                and self.dropout_prob == 0.0 and self.misclass_prob == 0.0)


@dataclass
class SceneConfig:
    room_size: np.ndarray
    obstacles: list
    moving_objects: list
    points_per_scan: int
    fov_h: float  # radians
    fov_v: float
    range_noise_std: float
    min_range: float
    camera: CameraModel
    sensor_waypoints: np.ndarray
    sensor_speed: float
    sensor_yaw: float
    frame_rate: float
    n_frames: int
    seed: int
    degradation: MaskDegradation = field(default_factory=MaskDegradation)

    def sensor_pose_at(self, t: float) -> Pose:
        pos = _polyline_position(self.sensor_waypoints, self.sensor_speed, t)
        q = Rotation.from_euler("z", self.sensor_yaw).as_quat()
        return Pose(q, pos)


def _polyline_position(waypoints: np.ndarray, speed: float, t: float) -> np.ndarray:
    """Constant-speed ping-pong traversal of a waypoint polyline."""
    waypoints = np.atleast_2d(waypoints)
    if len(waypoints) == 1 or speed <= 0:
        return waypoints[0].copy()
    seg = np.diff(waypoints, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    total = float(seg_len.sum())
    if total <= 0:
        return waypoints[0].copy()
    s = (speed * t) % (2.0 * total)
    if s > total:
        s = 2.0 * total - s
    acc = 0.0
    for k in range(len(seg)):
        if s <= acc + seg_len[k] or k == len(seg) - 1:
            frac = (s - acc) / seg_len[k] if seg_len[k] > 0 else 0.0
            return waypoints[k] + frac * seg[k]
        acc += seg_len[k]
    return waypoints[-1].copy()


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

def scene_from_dict(d: dict) -> SceneConfig:
    require_keys(d, {"room", "obstacles", "moving_objects", "sensor", "camera",
                     "trajectory", "frame_rate", "n_frames", "seed",
                     "degradation"}, "scene",
                 required={"room", "sensor", "camera", "trajectory",
                           "frame_rate", "n_frames", "seed"})
    require_keys(d["room"], {"size"}, "scene.room", required={"size"})
    room = np.asarray(d["room"]["size"], dtype=float)
    if room.shape != (3,) or np.any(room <= 0):
        raise ConfigError("scene.room.size must be 3 positive extents")

    obstacles = []
    for i, ob in enumerate(d.get("obstacles") or []):
        ctx = f"scene.obstacles[{i}]"
        shape = ob.get("shape")
        if shape == "box":
            require_keys(ob, {"shape", "center", "size", "color"}, ctx,
                         required={"shape", "center", "size"})
            obstacles.append(BoxSpec(np.asarray(ob["center"], float),
                                     np.asarray(ob["size"], float),
                                     np.asarray(ob.get("color", [180, 180, 180]), float)))
        elif shape == "cylinder":
            require_keys(ob, {"shape", "center", "radius", "height", "color"}, ctx,
                         required={"shape", "center", "radius", "height"})
            obstacles.append(CylinderSpec(np.asarray(ob["center"], float),
                                          float(ob["radius"]), float(ob["height"]),
                                          np.asarray(ob.get("color", [180, 180, 180]), float)))
        else:
            raise ConfigError(f"{ctx}: unknown shape {shape!r}")

    movers = []
    for i, mo in enumerate(d.get("moving_objects") or []):
        ctx = f"scene.moving_objects[{i}]"
        require_keys(mo, {"shape", "size", "class_name", "class_id", "color",
                          "waypoints", "speed"}, ctx,
                     required={"shape", "size", "class_name", "class_id",
                               "waypoints", "speed"})
        if mo["shape"] not in ("box", "cylinder"):
            raise ConfigError(f"{ctx}: unknown shape {mo['shape']!r}")
        movers.append(MovingObject(
            mo["shape"], np.asarray(mo["size"], float), str(mo["class_name"]),
            int(mo["class_id"]), np.asarray(mo.get("color", [200, 60, 60]), float),
            np.atleast_2d(np.asarray(mo["waypoints"], float)), float(mo["speed"])))

    s = d["sensor"]
    require_keys(s, {"points_per_scan", "fov_h_deg", "fov_v_deg",
                     "range_noise_std", "min_range"}, "scene.sensor",
                 required={"points_per_scan", "fov_h_deg", "fov_v_deg"})
    pps = int(s["points_per_scan"])
    if pps < 1:
        raise ConfigError("scene.sensor.points_per_scan must be >= 1")

    c = d["camera"]
    require_keys(c, {"width", "height", "fx", "fy", "cx", "cy"}, "scene.camera",
                 required={"width", "height", "fx", "fy", "cx", "cy"})
    extrinsic = Pose(Rotation.from_matrix(SENSOR_TO_CAMERA).as_quat(), np.zeros(3))
    camera = CameraModel(float(c["fx"]), float(c["fy"]), float(c["cx"]),
                         float(c["cy"]), int(c["width"]), int(c["height"]),
                         extrinsic)

    tr = d["trajectory"]
    require_keys(tr, {"position", "waypoints", "speed", "yaw_deg"},
                 "scene.trajectory")
    if "position" in tr:
        waypoints = np.atleast_2d(np.asarray(tr["position"], float))
        speed = 0.0
    elif "waypoints" in tr:
        waypoints = np.atleast_2d(np.asarray(tr["waypoints"], float))
        speed = float(tr.get("speed", 0.0))
    else:
        raise ConfigError("scene.trajectory needs 'position' or 'waypoints'")

    deg = d.get("degradation") or {}
    require_keys(deg, {"erosion_radius", "truncation_fraction", "dropout_prob",
                       "misclass_prob"}, "scene.degradation")
    degradation = MaskDegradation(int(deg.get("erosion_radius", 0)),
                                  float(deg.get("truncation_fraction", 0.0)),
                                  float(deg.get("dropout_prob", 0.0)),
                                  float(deg.get("misclass_prob", 0.0)))

    n_frames = int(d["n_frames"])
    frame_rate = float(d["frame_rate"])
    if n_frames < 1 or frame_rate <= 0:
        raise ConfigError("n_frames must be >= 1 and frame_rate > 0")

    return SceneConfig(room, obstacles, movers, pps,
                       np.deg2rad(float(s["fov_h_deg"])),
                       np.deg2rad(float(s["fov_v_deg"])),
                       float(s.get("range_noise_std", 0.005)),
                       float(s.get("min_range", 0.05)),
                       camera, waypoints, speed,
                       np.deg2rad(float(tr.get("yaw_deg", 0.0))),
                       frame_rate, n_frames, int(d["seed"]), degradation)


def scene_from_yaml(path) -> SceneConfig:
    import yaml
    with open(path) as f:
        d = yaml.safe_load(f)
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: scene config must be a mapping")
    return scene_from_dict(d)


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------

def _ray_box_exit(origin, dirs, lo, hi):
    """Exit distance of rays starting inside an AABB."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    return np.min(np.maximum(t1, t2), axis=1)


def _ray_box_enter(origin, dirs, lo, hi):
    """Entry distance into an AABB (inf where missed)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    tmin = np.max(np.minimum(t1, t2), axis=1)
    tmax = np.min(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmin > 1e-9)
    return np.where(hit, tmin, np.inf)


def _ray_cylinder(origin, dirs, center, radius, z0, z1):
    """Nearest positive hit on a capped vertical cylinder (inf where missed)."""
    fx = origin[0] - center[0]
    fy = origin[1] - center[1]
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    a = dx * dx + dy * dy
    b = 2.0 * (fx * dx + fy * dy)
    cc = fx * fx + fy * fy - radius * radius
    disc = b * b - 4.0 * a * cc
    best = np.full(len(dirs), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        for sign in (-1.0, 1.0):
            t = (-b + sign * sq) / (2.0 * a)
            z = origin[2] + t * dz
            ok = (disc >= 0) & (a > 1e-12) & (t > 1e-9) & (z >= z0) & (z <= z1)
            best = np.where(ok & (t < best), t, best)
        for zc in (z0, z1):
            t = (zc - origin[2]) / dz
            x = origin[0] + t * dx
            y = origin[1] + t * dy
            ok = (np.abs(dz) > 1e-12) & (t > 1e-9) & \
                 ((x - center[0]) ** 2 + (y - center[1]) ** 2 <= radius * radius)
            best = np.where(ok & (t < best), t, best)
    return best


def _cast(origin, dirs, room_size, primitives):
    """Nearest hit of each ray.

    Returns (t (N,), owner (N,)): owner 0 is the room shell, 1..len(primitives)
    indexes ``primitives`` in order.
    """
    t_best = _ray_box_exit(origin, dirs, np.zeros(3), room_size)
    owner = np.zeros(len(dirs), dtype=np.int64)
    for k, prim in enumerate(primitives):
        if isinstance(prim, BoxSpec):
            t = _ray_box_enter(origin, dirs, prim.lo, prim.hi)
        else:
            z0 = prim.center[2] - prim.height / 2.0
            z1 = prim.center[2] + prim.height / 2.0
            t = _ray_cylinder(origin, dirs, prim.center, prim.radius, z0, z1)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        owner = np.where(closer, k + 1, owner)
    return t_best, owner


def scan_ray_directions(config: SceneConfig) -> np.ndarray:
    """Sensor-frame unit directions on a regular azimuth/elevation grid sized
    to points_per_scan with the FOV's aspect ratio."""
    n_el = max(1, int(round(np.sqrt(config.points_per_scan
                                    * config.fov_v / max(config.fov_h, 1e-9)))))
    n_az = max(1, config.points_per_scan // n_el)
    az = np.linspace(-config.fov_h / 2.0, config.fov_h / 2.0, n_az)
    el = np.linspace(-config.fov_v / 2.0, config.fov_v / 2.0, n_el)
    ee, aa = np.meshgrid(el, az, indexing="ij")
    d = np.stack([np.cos(ee) * np.cos(aa),
                  np.cos(ee) * np.sin(aa),
                  np.sin(ee)], axis=-1)
    return d.reshape(-1, 3)


def camera_ray_directions(cam: CameraModel) -> np.ndarray:
    """Camera-frame directions through every pixel center, row-major."""
    u = (np.arange(cam.width) + 0.5 - cam.cx) / cam.fx
    v = (np.arange(cam.height) + 0.5 - cam.cy) / cam.fy
    vv, uu = np.meshgrid(v, u, indexing="ij")
    d = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    return d.reshape(-1, 3)


@dataclass
class SimFrame:
    frame_id: int
    timestamp: float
    cloud: PointCloud  # sensor frame, labels left unlabeled
    gt_labels: np.ndarray
    seg: SegmentationResult  # perfect silhouettes
    pose: Pose  # ground-truth sensor pose


def generate_frames(config: SceneConfig):
    """Yield SimFrame objects; same config + seed replays identically."""
    if len(config.moving_objects) == 0 and len(config.obstacles) == 0 \
            and np.any(config.room_size <= 0):
        raise ConfigError("empty scene")
    scan_dirs = scan_ray_directions(config)
    cam_dirs = camera_ray_directions(config.camera)
    cam = config.camera
    r_sc = cam.extrinsic.rotation.inv()  # camera -> sensor

    static_prims = list(config.obstacles)
    n_static = len(static_prims)

    for fid in range(config.n_frames):
        t = fid / config.frame_rate
        pose = config.sensor_pose_at(t)
        rot = pose.rotation
        prims = static_prims + [m.primitive_at(t) for m in config.moving_objects]

        # LiDAR scan
        dirs_w = rot.apply(scan_dirs)
        dist, owner = _cast(pose.t, dirs_w, config.room_size, prims)
        rng = np.random.default_rng([config.seed, fid])
        noise = rng.normal(0.0, config.range_noise_std, len(dist)) \
            if config.range_noise_std > 0 else np.zeros(len(dist))
        keep = np.isfinite(dist) & (dist >= config.min_range)
        rng_dist = dist[keep] + noise[keep]
        pts_sensor = scan_dirs[keep] * rng_dist[:, None]
        owner_colors = np.vstack(
            [[200, 200, 200]] + [np.clip(p.color, 0, 255) for p in prims]
        ).astype(np.uint8)
        colors = owner_colors[owner[keep]]
        gt = np.where(owner[keep] > n_static,
                      LABEL_DYNAMIC + (owner[keep] - n_static - 1),
                      LABEL_STATIC).astype(np.int32)
        cloud = PointCloud(pts_sensor, colors, None, fid, t)

        # Camera mask: silhouettes of moving objects with occlusion
        cam_dirs_w = rot.apply(r_sc.apply(cam_dirs))
        _, cam_owner = _cast(pose.t, cam_dirs_w, config.room_size, prims)
        inst_img = np.where(cam_owner > n_static, cam_owner - n_static,
                            0).astype(np.int64).reshape(cam.height, cam.width)
        instances = []
        for j, mo in enumerate(config.moving_objects):
            bitmap = inst_img == j + 1
            if not bitmap.any():
                continue
            instances.append(InstanceMask(j + 1, mo.class_id, mo.class_name,
                                          1.0, bitmap, tight_bbox(bitmap)))
        seg = SegmentationResult(fid, cam.width, cam.height, instances)
        yield SimFrame(fid, t, cloud, gt, seg, pose)


def generate_sequence(config: SceneConfig):
    return list(generate_frames(config))


def degrade_segmentation(seg: SegmentationResult, d: MaskDegradation,
                         seed: int) -> SegmentationResult:
    """Apply erosion / truncation / dropout / misclassification to one frame.

    Per-frame draw order (rng = default_rng([seed, frame_id])): the dropout
    decision first, then per instance in ascending id one misclassification
    draw (if misclass_prob > 0) and one truncation-side draw (if
    truncation_fraction > 0). Erosion is deterministic.
    """
    if d.is_identity:
        return seg
    rng = np.random.default_rng([seed, seg.frame_id])
    if d.dropout_prob > 0 and rng.random() < d.dropout_prob:
        return SegmentationResult(seg.frame_id, seg.width, seg.height, [])
    out = []
    for inst in seg.instances:
        class_id, class_name = inst.class_id, inst.class_name
        if d.misclass_prob > 0 and rng.random() < d.misclass_prob:
            class_id, class_name = MISCLASS_CLASS_ID, MISCLASS_CLASS_NAME
        bitmap = inst.bitmap
        if d.erosion_radius > 0:
            bitmap = erode(bitmap, d.erosion_radius)
        if d.truncation_fraction > 0:
            side = int(rng.integers(4))
            bitmap = _truncate(bitmap, d.truncation_fraction, side)
        if not bitmap.any():
            continue
        out.append(InstanceMask(inst.instance_id, class_id, class_name,
                                inst.confidence, bitmap, tight_bbox(bitmap)))
    return SegmentationResult(seg.frame_id, seg.width, seg.height, out)


def _truncate(bitmap: np.ndarray, fraction: float, side: int) -> np.ndarray:
    """Clear a fraction of the instance's bbox rows/cols from one side
    (0 top, 1 bottom, 2 left, 3 right)."""
    x, y, w, h = tight_bbox(bitmap)
    out = bitmap.copy()
    if side == 0:
        out[y:y + int(round(h * fraction)), :] = False
    elif side == 1:
        out[y + h - int(round(h * fraction)):y + h, :] = False
    elif side == 2:
        out[:, x:x + int(round(w * fraction))] = False
    else:
        out[:, x + w - int(round(w * fraction)):x + w] = False
    return out


def degrade_masks(frames, d: MaskDegradation, seed: int):
    """Sequence-level counterpart of :func:`degrade_segmentation`."""
    out = []
    for fr in frames:
        out.append(SimFrame(fr.frame_id, fr.timestamp, fr.cloud, fr.gt_labels,
                            degrade_segmentation(fr.seg, d, seed), fr.pose))
    return out


def write_dataset(config: SceneConfig, out_dir):
    """Write the dataset layout the pipeline consumes: frames/NNNNNN.mmpc,
    masks/NNNNNN.png + .json, labels/NNNNNN.bin, calib.json, groundtruth.txt
    and dataset_info.json."""
    for sub in ("frames", "masks", "labels"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    config.camera.to_json(os.path.join(out_dir, "calib.json"))
    stamps, poses = [], []
    n_points = 0
    for fr in generate_frames(config):
        seg = degrade_segmentation(fr.seg, config.degradation, config.seed)
        cloud_io.write_cloud(cloud_io.frame_path(out_dir, "frames", fr.frame_id, "mmpc"),
                             fr.cloud)
        cloud_io.write_labels(cloud_io.frame_path(out_dir, "labels", fr.frame_id, "bin"),
                              fr.gt_labels)
        save_segmentation(seg, cloud_io.frame_path(out_dir, "masks", fr.frame_id, "png"))
        stamps.append(fr.timestamp)
        poses.append(fr.pose)
        n_points = max(n_points, len(fr.cloud))
    cloud_io.write_trajectory(os.path.join(out_dir, "groundtruth.txt"), stamps, poses)
    with open(os.path.join(out_dir, "dataset_info.json"), "w") as f:
        json.dump({"n_frames": config.n_frames, "frame_rate": config.frame_rate,
                   "points_per_scan": n_points, "seed": config.seed}, f, indent=1)
