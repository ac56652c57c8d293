"""Mask/geometry fusion: project scan points into the camera, seed per-point
dynamic labels from the flattened mask, cluster the cloud in Euclidean space,
and fuse the two cues into the final dynamic/static partition.

Final rule after fusion: a point is dynamic iff it belongs to a dynamic
cluster (>= threshold of members initially mask-labeled) or lies within the
relabel radius of one. Isolated mask hits with no dynamic cluster nearby are
suppressed as false positives.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import (LABEL_DYNAMIC, LABEL_STATIC, PointCloud, Pose,
                       is_dynamic)


@dataclass
class CameraModel:
    """Pinhole intrinsics plus the sensor-to-camera extrinsic."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @staticmethod
    def from_json(path) -> "CameraModel":
        with open(path) as f:
            d = json.load(f)
        ext = np.asarray(d["extrinsic"], dtype=float).reshape(4, 4)
        return CameraModel(d["fx"], d["fy"], d["cx"], d["cy"],
                           d["width"], d["height"], Pose.from_matrix(ext))

    def to_json(self, path):
        d = {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
             "width": self.width, "height": self.height,
             "extrinsic": [float(v) for v in self.extrinsic.matrix().ravel()]}
        with open(path, "w") as f:
            json.dump(d, f, indent=1)


def project_points(cam: CameraModel, points: np.ndarray):
    """Vectorized pinhole projection.

    Returns (uv (N, 2), depth (N,), in_view (N,)); uv/depth are only
    meaningful where in_view is True. A point is in view when it is in front
    of the camera and its pixel falls inside the image.
    """
    q = cam.extrinsic.apply(np.atleast_2d(points))
    z = q[:, 2]
    in_front = z > 0
    zsafe = np.where(in_front, z, 1.0)
    u = cam.fx * q[:, 0] / zsafe + cam.cx
    v = cam.fy * q[:, 1] / zsafe + cam.cy
    in_view = in_front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return np.stack([u, v], axis=1), z, in_view


def project_point(cam: CameraModel, point):
    """Single-point projection: (u, v, depth), or None when out of view."""
    uv, z, ok = project_points(cam, np.asarray(point, dtype=float)[None, :])
    if not ok[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0])


def label_points(cloud: PointCloud, mask: np.ndarray, cam: CameraModel) -> PointCloud:
    """Seed labels from the dynamic-state mask: an in-view point whose pixel is
    set becomes dynamic, everything else static."""
    if mask.shape != (cam.height, cam.width):
        raise ValueError(f"mask is {mask.shape[1]}x{mask.shape[0]} but camera "
                         f"expects {cam.width}x{cam.height}")
    labels = np.full(len(cloud), LABEL_STATIC, dtype=np.int32)
    uv, _, in_view = project_points(cam, cloud.positions)
    if np.any(in_view):
        px = uv[in_view].astype(np.int64)
        hit = mask[px[:, 1], px[:, 0]]
        idx = np.nonzero(in_view)[0][hit]
        labels[idx] = LABEL_DYNAMIC
    return cloud.with_labels(labels)


@dataclass
class Cluster:
    point_ids: np.ndarray  # ids into the clustered cloud, ascending
    dynamic_fraction: float
    centroid: np.ndarray
    is_dynamic: bool = False

    def __len__(self):
        return len(self.point_ids)


def euclidean_cluster(cloud: PointCloud, tolerance: float,
                      min_size: int, max_size: int) -> list:
    """Connected components of the <= tolerance proximity graph.

    Components outside [min_size, max_size] are dropped. Output is sorted by
    descending size, ties by smallest member id.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be > 0")
    if not 1 <= min_size <= max_size:
        raise ValueError("need 1 <= min_size <= max_size")
    n = len(cloud)
    if n == 0:
        return []
    tree = cKDTree(cloud.positions)
    pairs = tree.query_pairs(tolerance, output_type="ndarray")
    if len(pairs):
        ones = np.ones(len(pairs), dtype=np.int8)
        graph = coo_matrix((ones, (pairs[:, 0], pairs[:, 1])), shape=(n, n))
        _, comp = connected_components(graph, directed=False)
    else:
        comp = np.arange(n)
    dyn = (is_dynamic(cloud.labels) if cloud.labels is not None
           else np.zeros(n, dtype=bool))
    clusters = []
    for c in np.unique(comp):
        ids = np.nonzero(comp == c)[0]
        if not min_size <= len(ids) <= max_size:
            continue
        clusters.append(Cluster(
            ids,
            float(np.count_nonzero(dyn[ids])) / len(ids),
            cloud.positions[ids].mean(axis=0)))
    clusters.sort(key=lambda cl: (-len(cl.point_ids), cl.point_ids[0]))
    return clusters


@dataclass
class FusionOutput:
    dynamic: PointCloud
    static: PointCloud
    clusters: list
    dynamic_ids: np.ndarray
    static_ids: np.ndarray
    labels: np.ndarray  # final per-point labels of the input cloud


def fuse_labels(cloud: PointCloud, clusters, relabel_radius: float,
                dyn_threshold: float = 0.9) -> FusionOutput:
    """Apply the cluster-fraction rule and the proximity relabeling rules.

    A cluster is dynamic iff its initially-dynamic fraction reaches
    ``dyn_threshold``. Every member of a dynamic cluster is dynamic; every
    other point is dynamic iff it lies within ``relabel_radius`` of a dynamic
    cluster. Dynamic instance ids are assigned per dynamic cluster, in cluster
    order, and proximity-relabeled points inherit the nearest cluster's id.
    """
    if not 0.0 < dyn_threshold <= 1.0:
        raise ValueError("dyn_threshold must be in (0, 1]")
    n = len(cloud)
    labels = np.full(n, LABEL_STATIC, dtype=np.int32)
    dyn_clusters = []
    for cl in clusters:
        cl.is_dynamic = cl.dynamic_fraction >= dyn_threshold
        if cl.is_dynamic:
            dyn_clusters.append(cl)
    if dyn_clusters:
        anchor_ids = np.concatenate([cl.point_ids for cl in dyn_clusters])
        anchor_inst = np.concatenate([
            np.full(len(cl.point_ids), k, dtype=np.int64)
            for k, cl in enumerate(dyn_clusters)])
        for k, cl in enumerate(dyn_clusters):
            labels[cl.point_ids] = LABEL_DYNAMIC + k
        rest = np.setdiff1d(np.arange(n), anchor_ids, assume_unique=False)
        if len(rest):
            tree = cKDTree(cloud.positions[anchor_ids])
            d, j = tree.query(cloud.positions[rest], k=1)
            near = d <= relabel_radius
            labels[rest[near]] = LABEL_DYNAMIC + anchor_inst[j[near]]
    dynamic_ids = np.nonzero(labels >= LABEL_DYNAMIC)[0]
    static_ids = np.nonzero(labels < LABEL_DYNAMIC)[0]
    out_cloud = cloud.with_labels(labels)
    return FusionOutput(out_cloud.select(dynamic_ids), out_cloud.select(static_ids),
                        list(clusters), dynamic_ids, static_ids, labels)


def propagate_labels(full_cloud: PointCloud, down_cloud: PointCloud) -> np.ndarray:
    """Carry final labels from a downsampled cloud back to full resolution by
    nearest-downsampled-point assignment."""
    if down_cloud.labels is None:
        raise ValueError("downsampled cloud has no labels")
    if len(down_cloud) == 0:
        return np.full(len(full_cloud), LABEL_STATIC, dtype=np.int32)
    tree = cKDTree(down_cloud.positions)
    _, j = tree.query(full_cloud.positions, k=1, workers=-1)
    return down_cloud.labels[j]
