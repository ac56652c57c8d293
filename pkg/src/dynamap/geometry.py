"""Geometric primitives: point clouds, SE(3) poses, twists, voxel filtering and
spatial indexing. Everything downstream (fusion, odometry, mapping) is built on
this module.

Conventions: distances in meters, angles in radians, positions float64 (N, 3).
Point labels are small ints: 0 unlabeled, 1 static, >= 2 dynamic where the
instance id is ``label - 2``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

LABEL_UNLABELED = 0
LABEL_STATIC = 1
LABEL_DYNAMIC = 2  # dynamic instance k is stored as LABEL_DYNAMIC + k


def is_dynamic(labels: np.ndarray) -> np.ndarray:
    """Boolean mask of dynamically-labeled points."""
    return np.asarray(labels) >= LABEL_DYNAMIC


def dynamic_label(instance_id: int = 0) -> int:
    return LABEL_DYNAMIC + instance_id


def _skew(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


@dataclass(frozen=True)
class Twist:
    """SE(3) tangent vector: rotational part (rad) and translational part (m)."""

    rot: np.ndarray
    trans: np.ndarray

    @staticmethod
    def from_vector(xi: np.ndarray) -> "Twist":
        xi = np.asarray(xi, dtype=float)
        return Twist(xi[:3].copy(), xi[3:6].copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rot, self.trans])


@dataclass(frozen=True)
class Pose:
    """Rigid transform in SE(3): unit quaternion (x, y, z, w) + translation.

    Maps source-frame points into the target frame: p' = R p + t.
    """

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        t = np.asarray(self.t, dtype=float)
        if q.shape != (4,) or t.shape != (3,):
            raise ValueError("Pose expects quaternion (4,) and translation (3,)")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValueError("Pose components must be finite")
        n = np.linalg.norm(q)
        if n == 0.0:
            raise ValueError("zero quaternion")
        object.__setattr__(self, "q", q / n)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @staticmethod
    def from_rotation(rotation: Rotation, t=(0.0, 0.0, 0.0)) -> "Pose":
        return Pose(rotation.as_quat(), np.asarray(t, dtype=float))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return Pose(Rotation.from_matrix(m[:3, :3]).as_quat(), m[:3, 3].copy())

    @property
    def rotation(self) -> Rotation:
        return Rotation.from_quat(self.q)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.as_matrix()
        m[:3, 3] = self.t
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other: (self * other) p = self(other(p))."""
        r = self.rotation
        return Pose((r * other.rotation).as_quat(), r.apply(other.t) + self.t)

    def invert(self) -> "Pose":
        rinv = self.rotation.inv()
        return Pose(rinv.as_quat(), -rinv.apply(self.t))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return self.rotation.apply(points) + self.t

    def rotation_angle(self) -> float:
        """Magnitude of the rotation, in [0, pi]."""
        return float(np.linalg.norm(self.rotation.as_rotvec()))


def pose_errors(a: Pose, b: Pose):
    """(translation distance, relative rotation angle) between two poses."""
    rel = a.invert().compose(b)
    return float(np.linalg.norm(b.t - a.t)), rel.rotation_angle()


def se3_exp(twist: Twist) -> Pose:
    """Closed-form SE(3) exponential map.

    R = exp([w]x), t = V v with V = I + a [w]x + b [w]x^2,
    a = (1 - cos th)/th^2, b = (th - sin th)/th^3. Small angles use the
    Taylor expansions of a and b (the 1 - cos term is computed as
    2 sin^2(th/2) to avoid cancellation).
    """
    w = np.asarray(twist.rot, dtype=float)
    v = np.asarray(twist.trans, dtype=float)
    th = np.linalg.norm(w)
    wx = _skew(w)
    if th < 1e-6:
        a = 0.5 - th * th / 24.0
        b = 1.0 / 6.0 - th * th / 120.0
    else:
        a = 2.0 * np.sin(th / 2.0) ** 2 / (th * th)
        b = (th - np.sin(th)) / th**3
    vmat = np.eye(3) + a * wx + b * (wx @ wx)
    return Pose(Rotation.from_rotvec(w).as_quat(), vmat @ v)


def se3_log(pose: Pose) -> Twist:
    """Inverse of :func:`se3_exp` for rotation angles below pi."""
    w = pose.rotation.as_rotvec()
    th = np.linalg.norm(w)
    wx = _skew(w)
    if th < 1e-6:
        c = 1.0 / 12.0 + th * th / 720.0
    else:
        # V^-1 = I - [w]x/2 + c [w]x^2 with c = (1 - (th/2) cot(th/2)) / th^2
        c = (1.0 - (th / 2.0) / np.tan(th / 2.0)) / (th * th)
    vinv = np.eye(3) - 0.5 * wx + c * (wx @ wx)
    return Twist(w, vinv @ pose.t)


@dataclass
class PointCloud:
    """A scan or map fragment: positions (N, 3) with optional colors/labels.

    Treated as immutable after construction; operations return new clouds and
    may share untouched component arrays.
    """

    positions: np.ndarray
    colors: np.ndarray | None = None
    labels: np.ndarray | None = None
    frame_id: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must be (N, 3)")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions contain NaN/Inf")
        n = len(self.positions)
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.uint8)
            if self.colors.shape != (n, 3):
                raise ValueError("colors must be (N, 3)")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
            if self.labels.shape != (n,):
                raise ValueError("labels must be (N,)")

    def __len__(self) -> int:
        return len(self.positions)

    def with_labels(self, labels: np.ndarray) -> "PointCloud":
        return PointCloud(self.positions, self.colors, labels,
                          self.frame_id, self.timestamp)

    def select(self, ids) -> "PointCloud":
        """Subset cloud by integer ids or a boolean mask."""
        return PointCloud(
            self.positions[ids],
            None if self.colors is None else self.colors[ids],
            None if self.labels is None else self.labels[ids],
            self.frame_id, self.timestamp)


def transform_cloud(pose: Pose, cloud: PointCloud) -> PointCloud:
    """Rigidly transform every position; colors/labels/order preserved."""
    return PointCloud(pose.apply(cloud.positions), cloud.colors, cloud.labels,
                      cloud.frame_id, cloud.timestamp)


def concat_clouds(a: PointCloud, b: PointCloud) -> PointCloud:
    def _cat(x, y, fill, dtype):
        if x is None and y is None:
            return None
        if x is None:
            x = np.full((len(a), 3) if dtype == np.uint8 else (len(a),), fill, dtype=dtype)
        if y is None:
            y = np.full((len(b), 3) if dtype == np.uint8 else (len(b),), fill, dtype=dtype)
        return np.concatenate([x, y])

    return PointCloud(
        np.concatenate([a.positions, b.positions]),
        _cat(a.colors, b.colors, 0, np.uint8),
        _cat(a.labels, b.labels, LABEL_UNLABELED, np.int32),
        a.frame_id, a.timestamp)


def voxel_keys(positions: np.ndarray, leaf: float) -> np.ndarray:
    """Pack integer voxel coordinates into one int64 key per point."""
    ijk = np.floor(positions / leaf).astype(np.int64)
    lo = ijk.min(axis=0)
    ijk = ijk - lo
    if np.any(ijk >= (1 << 21)):
        raise ValueError("voxel grid exceeds 2^21 cells per axis")
    return (ijk[:, 0] << 42) | (ijk[:, 1] << 21) | ijk[:, 2]


def voxel_downsample(cloud: PointCloud, leaf: float) -> PointCloud:
    """One centroid point per occupied voxel of side ``leaf``.

    Colors are averaged; the merged label is the per-voxel maximum, which makes
    dynamic labels dominate static ones (and static dominate unlabeled).
    """
    if leaf <= 0:
        raise ValueError("leaf size must be > 0")
    if len(cloud) == 0:
        return cloud
    keys = voxel_keys(cloud.positions, leaf)
    uniq, inv = np.unique(keys, return_inverse=True)
    m = len(uniq)
    counts = np.bincount(inv, minlength=m).astype(float)
    centroids = np.empty((m, 3))
    for ax in range(3):
        centroids[:, ax] = np.bincount(inv, weights=cloud.positions[:, ax],
                                       minlength=m) / counts
    colors = None
    if cloud.colors is not None:
        colors = np.empty((m, 3), dtype=np.uint8)
        for ch in range(3):
            mean = np.bincount(inv, weights=cloud.colors[:, ch].astype(float),
                               minlength=m) / counts
            colors[:, ch] = np.clip(np.rint(mean), 0, 255).astype(np.uint8)
    labels = None
    if cloud.labels is not None:
        labels = np.full(m, np.iinfo(np.int32).min, dtype=np.int32)
        np.maximum.at(labels, inv, cloud.labels)
    return PointCloud(centroids, colors, labels, cloud.frame_id, cloud.timestamp)


class SpatialIndex:
    """Read-only nearest-neighbor index over a fixed point set.

    Query semantics are pinned for reproducibility: radius search is inclusive
    (distance <= r) with ids returned in ascending order; k-NN breaks distance
    ties by the smaller point index.
    """

    def __init__(self, positions: np.ndarray):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must be (N, 3)")
        self._tree = cKDTree(self.positions)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def tree(self) -> cKDTree:
        return self._tree

    def radius_search(self, center, r: float) -> np.ndarray:
        if r <= 0:
            raise ValueError("radius must be > 0")
        ids = self._tree.query_ball_point(np.asarray(center, dtype=float), r)
        return np.sort(np.asarray(ids, dtype=np.int64))

    def knn_search(self, center, k: int) -> np.ndarray:
        """Ids of the k nearest points (all points, in order, if k > size)."""
        if k < 1:
            raise ValueError("k must be >= 1")
        center = np.asarray(center, dtype=float)
        n = len(self.positions)
        k_eff = min(k, n)
        d, _ = self._tree.query(center, k=k_eff)
        d_max = float(np.max(np.atleast_1d(d)))
        # Re-pull everything within the boundary distance so that exact ties are
        # broken by index rather than by tree traversal order. The radius is
        # inflated by an ulp-scale margin: the tree's query() and ball-query
        # distance tests can disagree on the last bit.
        r = d_max * (1.0 + 1e-12) + 1e-300
        cand = np.asarray(self._tree.query_ball_point(center, r), dtype=np.int64)
        cd = np.linalg.norm(self.positions[cand] - center, axis=1)
        order = np.lexsort((cand, cd))
        return cand[order][:k_eff]


def build_index(cloud: PointCloud) -> SpatialIndex:
    return SpatialIndex(cloud.positions)
