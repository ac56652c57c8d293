"""Scan-to-local-map odometry on the static cloud: smoothness-based edge/planar
feature extraction, point-to-edge / point-to-plane residuals with analytic
Jacobians, Gauss-Newton pose refinement with step halving, sliding local
feature maps and keyframe gating.

The per-point smoothness is the mean range difference against the radius
neighborhood,

    sigma_k = (1/|S_k|) * sum_i (||p_k|| - ||p_i||),

signed: concave structure seen from the sensor gives positive values, convex
silhouettes negative ones. Feature selection thresholds |sigma|.

Pose updates use the left-multiplicative convention T <- exp(delta) * T with
twist ordering (rotation, translation).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (PointCloud, Pose, Twist, se3_exp, voxel_keys)

DEGENERACY_EPS = 1e-6


class DegenerateRegistration(RuntimeError):
    """Not enough valid correspondences (or map content) to solve; carries the
    initial pose so callers can fall back to it."""

    def __init__(self, message, init_pose: Pose):
        super().__init__(message)
        self.init_pose = init_pose


class SolverFailure(RuntimeError):
    """Normal equations produced a non-finite or unsolvable system."""


def compute_smoothness(cloud: PointCloud, radius: float,
                       min_neighbors: int = 4) -> np.ndarray:
    """Per-point signed smoothness; NaN marks points with too few neighbors.

    Uses the identity mean(||p_k|| - ||p_i||) = ||p_k|| - mean ||p_i|| so the
    neighbor sums can be accumulated from the KD-tree pair list.
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    n = len(cloud)
    ranges = np.linalg.norm(cloud.positions, axis=1)
    counts = np.zeros(n, dtype=np.int64)
    sums = np.zeros(n)
    pairs = cKDTree(cloud.positions).query_pairs(radius, output_type="ndarray")
    if len(pairs):
        i, j = pairs[:, 0], pairs[:, 1]
        np.add.at(counts, i, 1)
        np.add.at(counts, j, 1)
        np.add.at(sums, i, ranges[j])
        np.add.at(sums, j, ranges[i])
    sigma = np.full(n, np.nan)
    ok = counts >= min_neighbors
    sigma[ok] = ranges[ok] - sums[ok] / counts[ok]
    return sigma


@dataclass
class FeatureSet:
    """Edge and planar feature points of one frame (sensor coordinates)."""

    edges: np.ndarray  # (Ne, 3)
    edge_sigma: np.ndarray
    planars: np.ndarray  # (Np, 3)
    planar_sigma: np.ndarray
    frame_id: int = 0

    @staticmethod
    def empty(frame_id: int = 0) -> "FeatureSet":
        z3 = np.zeros((0, 3))
        z = np.zeros(0)
        return FeatureSet(z3, z, z3.copy(), z.copy(), frame_id)

    @property
    def degenerate(self) -> bool:
        return len(self.edges) == 0 and len(self.planars) == 0


def extract_features(cloud: PointCloud, smoothness_radius: float = 0.5,
                     min_neighbors: int = 4, edge_threshold: float = 0.05,
                     planar_threshold: float = 0.01, sectors: int = 6,
                     max_edges_per_sector: int = 10,
                     max_planars_per_sector: int = 60) -> FeatureSet:
    """Select per-sector extrema of |sigma|: the strongest candidates above the
    edge threshold become edges, the flattest below the planar threshold become
    planars. Sectors split the occupied azimuth range so limited-FOV scans
    still spread their feature budget."""
    if len(cloud) == 0:
        return FeatureSet.empty(cloud.frame_id)
    sigma = compute_smoothness(cloud, smoothness_radius, min_neighbors)
    eligible = np.isfinite(sigma)
    if not np.any(eligible):
        return FeatureSet.empty(cloud.frame_id)
    pos = cloud.positions
    rng_k = np.linalg.norm(pos, axis=1)
    az = np.arctan2(pos[:, 1], pos[:, 0])
    el = np.arctan2(pos[:, 2], np.hypot(pos[:, 0], pos[:, 1]))
    # Points within one neighborhood radius of the scan's angular boundary see
    # a one-sided neighborhood; their sigma is a truncation artifact, not
    # structure, so they are excluded from the candidate pool.
    margin = np.arctan2(smoothness_radius, np.maximum(rng_k, 1e-9))
    for ang in (az, el):
        a_lo, a_hi = ang[eligible].min(), ang[eligible].max()
        eligible &= (ang >= a_lo + margin) & (ang <= a_hi - margin)
    if not np.any(eligible):
        return FeatureSet.empty(cloud.frame_id)
    lo, hi = az[eligible].min(), az[eligible].max()
    span = max(hi - lo, 1e-9)
    sector = np.clip(((az - lo) / span * sectors).astype(np.int64), 0, sectors - 1)

    mag = np.abs(sigma)
    edge_ok = eligible & (mag > edge_threshold)
    if np.any(edge_ok):
        edge_ok &= _two_sided_neighborhood(pos, az, el, rng_k, edge_ok,
                                           smoothness_radius)
    edge_ids, planar_ids = [], []
    for s in range(sectors):
        in_sector = np.nonzero(eligible & (sector == s))[0]
        if len(in_sector) == 0:
            continue
        cand = in_sector[edge_ok[in_sector]]
        if len(cand):
            order = np.argsort(-mag[cand], kind="stable")
            edge_ids.append(cand[order[:max_edges_per_sector]])
        m = mag[in_sector]
        cand = in_sector[m < planar_threshold]
        if len(cand):
            order = np.argsort(mag[cand], kind="stable")
            planar_ids.append(cand[order[:max_planars_per_sector]])
    e = np.concatenate(edge_ids) if edge_ids else np.zeros(0, dtype=np.int64)
    p = np.concatenate(planar_ids) if planar_ids else np.zeros(0, dtype=np.int64)
    return FeatureSet(cloud.positions[e], sigma[e],
                      cloud.positions[p], sigma[p], cloud.frame_id)


def _two_sided_neighborhood(pos, az, el, rng_k, cand_mask, radius):
    """Occlusion-shadow filter for edge candidates.

    A physical junction has surface on both angular sides; the boundary of an
    occlusion shadow (or of a hole left by removed dynamic points) has empty
    space on one side and would produce a strong, viewpoint-dependent fake
    edge. Keep a candidate only when neighbors exist on both azimuth sides and
    both elevation sides of it.
    """
    ids = np.nonzero(cand_mask)[0]
    keep = np.zeros(len(pos), dtype=bool)
    tree = cKDTree(pos)
    neighborhoods = tree.query_ball_point(pos[ids], radius)
    for k, nb in zip(ids, neighborhoods):
        nb = np.asarray(nb)
        nb = nb[nb != k]
        if len(nb) == 0:
            continue
        eps = 0.2 * np.arctan2(radius, rng_k[k])
        daz = az[nb] - az[k]
        dele = el[nb] - el[k]
        keep[k] = (daz.min() < -eps and daz.max() > eps
                   and dele.min() < -eps and dele.max() > eps)
    return keep


def residual_edge(phat, p1, p2) -> float:
    """Point-to-line distance ||(phat-p1) x (phat-p2)|| / ||p1-p2||."""
    phat, p1, p2 = (np.asarray(x, dtype=float) for x in (phat, p1, p2))
    base = np.linalg.norm(p1 - p2)
    if base <= DEGENERACY_EPS:
        raise ValueError("degenerate edge pair")
    return float(np.linalg.norm(np.cross(phat - p1, phat - p2)) / base)


def residual_plane(phat, p1, p2, p3) -> float:
    """Signed distance (phat-p1) . n/||n|| with n = (p1-p2) x (p1-p3)."""
    phat, p1, p2, p3 = (np.asarray(x, dtype=float) for x in (phat, p1, p2, p3))
    n = np.cross(p1 - p2, p1 - p3)
    nn = np.linalg.norm(n)
    if nn <= DEGENERACY_EPS:
        raise ValueError("collinear plane triple")
    return float(np.dot(phat - p1, n / nn))


def edge_residual_batch(phat, p1, p2):
    """Residuals and gradients d r / d phat for edge correspondences.

    Returns (r (N,), grad (N, 3), valid (N,)); rows with a degenerate base pair
    or zero residual direction have valid=False and zeroed gradient.
    """
    c = np.cross(phat - p1, phat - p2)
    cn = np.linalg.norm(c, axis=1)
    w = p1 - p2
    base = np.linalg.norm(w, axis=1)
    valid = base > DEGENERACY_EPS
    safe_base = np.where(valid, base, 1.0)
    r = cn / safe_base
    grad_ok = valid & (cn > 1e-12)
    denom = np.where(grad_ok, cn * safe_base, 1.0)
    grad = np.cross(w, c) / denom[:, None]
    grad[~grad_ok] = 0.0
    return r, grad, valid


def plane_residual_batch(phat, p1, p2, p3):
    """Signed residuals and gradients for plane correspondences."""
    n = np.cross(p1 - p2, p1 - p3)
    nn = np.linalg.norm(n, axis=1)
    valid = nn > DEGENERACY_EPS
    u = n / np.where(valid, nn, 1.0)[:, None]
    r = np.einsum("ij,ij->i", phat - p1, u)
    u = np.where(valid[:, None], u, 0.0)
    return r, u, valid


def twist_jacobian(phat, grad):
    """Rows d r / d (omega, v) for the left perturbation exp(delta) * T."""
    return np.hstack([np.cross(phat, grad), grad])


class LocalFeatureMap:
    """Sliding-window edge/planar maps: voxel-deduplicated (first point per
    voxel wins), evicted beyond a radius of the current pose, k-NN queryable."""

    def __init__(self, leaf: float = 0.05, window_radius: float = 30.0):
        if leaf <= 0 or window_radius <= 0:
            raise ValueError("leaf and window_radius must be > 0")
        self.leaf = leaf
        self.window_radius = window_radius
        self.edge_points = np.zeros((0, 3))
        self.planar_points = np.zeros((0, 3))
        self.edge_tree = None
        self.planar_tree = None

    @property
    def n_edges(self) -> int:
        return len(self.edge_points)

    @property
    def n_planars(self) -> int:
        return len(self.planar_points)

    def _merge(self, existing, incoming, center):
        pts = np.concatenate([existing, incoming]) if len(existing) else incoming
        if len(pts) == 0:
            return pts
        keys = voxel_keys(pts, self.leaf)
        _, first = np.unique(keys, return_index=True)
        pts = pts[np.sort(first)]
        keep = np.linalg.norm(pts - center, axis=1) <= self.window_radius
        return pts[keep]

    def update(self, features: FeatureSet, pose: Pose):
        """Insert the frame's features transformed by ``pose`` and refresh the
        filtered maps and their indexes."""
        self.edge_points = self._merge(self.edge_points,
                                       pose.apply(features.edges), pose.t)
        self.planar_points = self._merge(self.planar_points,
                                         pose.apply(features.planars), pose.t)
        self.edge_tree = cKDTree(self.edge_points) if len(self.edge_points) else None
        self.planar_tree = cKDTree(self.planar_points) if len(self.planar_points) else None


@dataclass
class RegistrationDiagnostics:
    iterations: int = 0
    final_cost: float = 0.0
    edge_inliers: int = 0
    planar_inliers: int = 0
    converged: bool = False
    cost_trace: list = field(default_factory=list)


@dataclass
class SolverConfig:
    max_iterations: int = 20
    convergence_delta: float = 1e-6
    outlier_gate: float = 1.0
    outlier_gate_tight: float = 0.5
    gate_tighten_after: int = 3
    knn_max_distance: float = 1.0
    min_map_edges: int = 10
    min_map_planars: int = 30
    min_correspondences: int = 10
    max_step_halvings: int = 6


def _associate(feature_points, tree, map_points, k, T, gate, max_dist):
    """Transform features by T and pull k nearest map points each; returns the
    transformed points and the (N, k, 3) neighbor stack with a distance gate."""
    if len(feature_points) == 0 or tree is None:
        return (np.zeros((0, 3)), np.zeros((0, k, 3)), np.zeros(0, dtype=bool))
    phat = T.apply(feature_points)
    d, idx = tree.query(phat, k=k, workers=-1)
    d = d.reshape(len(phat), k)
    idx = idx.reshape(len(phat), k)
    ok = np.all(d <= max_dist, axis=1)
    # query() pads with index == n when the tree is smaller than k
    nb = map_points[np.minimum(idx, len(map_points) - 1)]
    return phat, nb, ok


def _build_system(features, local_map, T, gate, cfg):
    """Collect gated residuals/Jacobians at pose T.

    Returns (r, J, edge_count, planar_count).
    """
    rows_r, rows_j = [], []
    ne = npl = 0

    phat, nb, ok = _associate(features.edges, local_map.edge_tree,
                              local_map.edge_points, 2, T, gate,
                              cfg.knn_max_distance)
    if len(phat):
        r, grad, valid = edge_residual_batch(phat, nb[:, 0], nb[:, 1])
        keep = ok & valid & (np.abs(r) <= gate)
        ne = int(np.count_nonzero(keep))
        if ne:
            rows_r.append(r[keep])
            rows_j.append(twist_jacobian(phat[keep], grad[keep]))

    phat, nb, ok = _associate(features.planars, local_map.planar_tree,
                              local_map.planar_points, 3, T, gate,
                              cfg.knn_max_distance)
    if len(phat):
        r, grad, valid = plane_residual_batch(phat, nb[:, 0], nb[:, 1], nb[:, 2])
        keep = ok & valid & (np.abs(r) <= gate)
        npl = int(np.count_nonzero(keep))
        if npl:
            rows_r.append(r[keep])
            rows_j.append(twist_jacobian(phat[keep], grad[keep]))

    if not rows_r:
        return np.zeros(0), np.zeros((0, 6)), 0, 0
    return np.concatenate(rows_r), np.vstack(rows_j), ne, npl


def estimate_pose(features: FeatureSet, local_map: LocalFeatureMap,
                  init: Pose, cfg: SolverConfig | None = None):
    """Gauss-Newton minimization of the summed squared edge/planar residuals.

    Re-associates against the local map every iteration, drops gated outliers,
    solves the 6-dof normal equations and applies T <- exp(delta) T with step
    halving whenever the (same-association) cost would increase.

    Returns (pose, RegistrationDiagnostics); raises DegenerateRegistration when
    the map or the correspondence set is too thin, SolverFailure on a
    non-finite solve.
    """
    cfg = cfg or SolverConfig()
    if local_map.n_edges < cfg.min_map_edges or local_map.n_planars < cfg.min_map_planars:
        raise DegenerateRegistration(
            f"local map too thin ({local_map.n_edges} edges, "
            f"{local_map.n_planars} planars)", init)
    T = init
    diag = RegistrationDiagnostics()
    for it in range(cfg.max_iterations):
        gate = (cfg.outlier_gate if it < cfg.gate_tighten_after
                else cfg.outlier_gate_tight)
        r, J, ne, npl = _build_system(features, local_map, T, gate, cfg)
        if len(r) < cfg.min_correspondences:
            raise DegenerateRegistration(
                f"only {len(r)} valid correspondences at iteration {it}", init)
        cost = float(np.dot(r, r))
        diag.cost_trace.append(cost)
        diag.edge_inliers, diag.planar_inliers = ne, npl
        diag.final_cost = cost
        diag.iterations = it + 1
        g = J.T @ r
        if np.max(np.abs(g)) < 1e-12:
            diag.converged = True
            break
        H = J.T @ J
        try:
            delta = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError as e:
            raise SolverFailure(f"normal equations singular: {e}")
        if not np.all(np.isfinite(delta)):
            raise SolverFailure("non-finite Gauss-Newton update")

        # Step halving against the current association's cost.
        scale = 1.0
        accepted = False
        for _ in range(cfg.max_step_halvings + 1):
            T_new = se3_exp(Twist.from_vector(scale * delta)).compose(T)
            r_new = _build_system(features, local_map, T_new, gate, cfg)[0]
            if len(r_new) >= cfg.min_correspondences and np.dot(r_new, r_new) <= cost:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            diag.converged = True  # stuck at a (local) minimum for this association
            break
        T = T_new
        if np.linalg.norm(scale * delta) < cfg.convergence_delta:
            diag.converged = True
            diag.final_cost = float(np.dot(r_new, r_new))
            break
    return T, diag


def is_keyframe(current: Pose, last_kf: Pose, t_thresh: float,
                r_thresh: float) -> bool:
    """True iff pose change since the last keyframe strictly exceeds the
    translation threshold (m) or rotation threshold (rad)."""
    if t_thresh <= 0 or r_thresh <= 0:
        raise ValueError("thresholds must be > 0")
    rel = last_kf.invert().compose(current)
    return bool(np.linalg.norm(rel.t) > t_thresh or rel.rotation_angle() > r_thresh)
