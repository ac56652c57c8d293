"""Dataset file formats: MMPC binary point-cloud frames (with an ASCII variant
for hand-written fixtures), raw per-point label files, and TUM-style
trajectories (``timestamp tx ty tz qx qy qz qw``).
"""

import os

import numpy as np

from .geometry import LABEL_UNLABELED, PointCloud, Pose

MMPC_MAGIC = b"MMPC"

_POINT_DTYPE = np.dtype([
    ("position", "<f4", (3,)),
    ("rgb", "u1", (3,)),
    ("label", "u1"),
])


class CloudFormatError(ValueError):
    pass


def write_cloud(path, cloud: PointCloud):
    """Write the binary MMPC format: magic, u32 LE count, 16 bytes per point."""
    rec = np.zeros(len(cloud), dtype=_POINT_DTYPE)
    rec["position"] = cloud.positions.astype(np.float32)
    if cloud.colors is not None:
        rec["rgb"] = cloud.colors
    if cloud.labels is not None:
        lab = np.clip(cloud.labels, 0, 255)
        rec["label"] = lab.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(MMPC_MAGIC)
        f.write(np.uint32(len(cloud)).tobytes())
        f.write(rec.tobytes())


def write_cloud_ascii(path, cloud: PointCloud):
    """ASCII variant: one ``x y z r g b label`` line per point."""
    colors = cloud.colors if cloud.colors is not None else np.zeros((len(cloud), 3), np.uint8)
    labels = cloud.labels if cloud.labels is not None else np.zeros(len(cloud), np.int32)
    with open(path, "w") as f:
        for p, c, l in zip(cloud.positions, colors, labels):
            f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]} {l}\n")


def read_cloud(path, frame_id: int = 0, timestamp: float = 0.0) -> PointCloud:
    """Read a cloud frame; binary MMPC and the ASCII variant are auto-detected."""
    with open(path, "rb") as f:
        head = f.read(4)
        if head == MMPC_MAGIC:
            raw = f.read(4)
            if len(raw) != 4:
                raise CloudFormatError(f"{path}: truncated MMPC header")
            n = int(np.frombuffer(raw, dtype="<u4")[0])
            body = f.read(n * _POINT_DTYPE.itemsize)
            if len(body) != n * _POINT_DTYPE.itemsize:
                raise CloudFormatError(f"{path}: truncated MMPC body "
                                       f"({len(body)} bytes for {n} points)")
            rec = np.frombuffer(body, dtype=_POINT_DTYPE)
            return PointCloud(rec["position"].astype(np.float64),
                              rec["rgb"].copy(),
                              rec["label"].astype(np.int32),
                              frame_id, timestamp)
    return _read_cloud_ascii(path, frame_id, timestamp)


def _read_cloud_ascii(path, frame_id, timestamp) -> PointCloud:
    try:
        data = np.loadtxt(path, ndmin=2, dtype=np.float64)
    except ValueError as e:
        raise CloudFormatError(f"{path}: not MMPC and not parseable ASCII ({e})")
    if data.size == 0:
        return PointCloud(np.zeros((0, 3)), frame_id=frame_id, timestamp=timestamp)
    if data.shape[1] not in (3, 6, 7):
        raise CloudFormatError(f"{path}: expected 3, 6 or 7 columns, got {data.shape[1]}")
    colors = data[:, 3:6].astype(np.uint8) if data.shape[1] >= 6 else None
    labels = (data[:, 6].astype(np.int32) if data.shape[1] == 7
              else np.full(len(data), LABEL_UNLABELED, np.int32))
    return PointCloud(data[:, :3], colors, labels, frame_id, timestamp)


def write_labels(path, labels: np.ndarray):
    np.clip(np.asarray(labels), 0, 255).astype(np.uint8).tofile(path)


def read_labels(path) -> np.ndarray:
    return np.fromfile(path, dtype=np.uint8).astype(np.int32)


def write_trajectory(path, stamps, poses):
    """TUM convention, one ``timestamp tx ty tz qx qy qz qw`` line per frame."""
    with open(path, "w") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for s, p in zip(stamps, poses):
            t, q = p.t, p.q
            f.write(f"{s:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                    f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n")


def read_trajectory(path):
    """Returns (timestamps (N,), list of Pose)."""
    stamps, poses = [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(x) for x in line.split()]
            if len(vals) != 8:
                raise CloudFormatError(f"{path}: bad trajectory line: {line!r}")
            stamps.append(vals[0])
            poses.append(Pose(np.array(vals[4:8]), np.array(vals[1:4])))
    return np.asarray(stamps), poses


def frame_path(dataset_dir, sub, frame_id, ext):
    return os.path.join(dataset_dir, sub, f"{frame_id:06d}.{ext}")
