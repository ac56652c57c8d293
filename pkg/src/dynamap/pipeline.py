"""Per-frame pipeline: load -> mask -> fuse -> odometry -> map. Three ablation
modes: ``none`` skips labeling entirely, ``vision`` takes the dilated mask
verdict as final, ``multimodal`` runs the full cluster fusion.

Registration degeneracy is a handled condition: the frame falls back to the
motion-model pose and is flagged in the diagnostics. Missing or malformed
dataset files are hard errors naming the frames involved.
"""

import csv
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import io as cloud_io
from .config import MODES, PipelineConfig
from .fusion import (CameraModel, euclidean_cluster, fuse_labels, label_points,
                     project_points, propagate_labels)
from .geometry import (LABEL_DYNAMIC, LABEL_STATIC, Pose, PointCloud,
                       is_dynamic, transform_cloud, voxel_downsample)
from .mapping import (DynamicMapSnapshot, GlobalStaticMap, update_dynamic_map,
                      write_boxes)
from .masks import dilate, flatten_dynamic, load_segmentation
from .odometry import (DegenerateRegistration, FeatureSet, LocalFeatureMap,
                       SolverConfig, extract_features, is_keyframe,
                       estimate_pose)


class DatasetError(RuntimeError):
    def __init__(self, message, frame_ids=()):
        super().__init__(message)
        self.frame_ids = list(frame_ids)


@dataclass
class FrameDiagnostics:
    frame_id: int
    timestamp: float
    iterations: int = 0
    cost: float = 0.0
    edge_inliers: int = 0
    planar_inliers: int = 0
    n_dynamic: int = 0
    degenerate: bool = False
    keyframe: bool = False


@dataclass
class RunResult:
    stamps: list = field(default_factory=list)
    poses: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    static_map: GlobalStaticMap | None = None
    last_dynamic: DynamicMapSnapshot | None = None
    keyframes: int = 0
    stage_seconds: dict = field(default_factory=dict)
    frames: int = 0
    static_inserted: int = 0
    gt_dynamic_inserted: int = 0

    @property
    def hz(self) -> float:
        total = sum(self.stage_seconds.values())
        return self.frames / total if total > 0 else float("inf")

    @property
    def map_taint_fraction(self) -> float:
        if self.static_inserted == 0:
            return 0.0
        return self.gt_dynamic_inserted / self.static_inserted


def _solver_config(cfg: PipelineConfig) -> SolverConfig:
    return SolverConfig(
        max_iterations=cfg.max_iterations,
        convergence_delta=cfg.convergence_delta,
        outlier_gate=cfg.outlier_gate,
        outlier_gate_tight=cfg.outlier_gate_tight,
        gate_tighten_after=cfg.outlier_gate_tighten_after,
        knn_max_distance=cfg.knn_max_distance,
        min_map_edges=cfg.min_map_edges,
        min_map_planars=cfg.min_map_planars,
        min_correspondences=cfg.min_correspondences)


def discover_frames(dataset_dir, need_masks: bool):
    """Frame ids present in frames/, with every required file checked up front."""
    frames_dir = os.path.join(dataset_dir, "frames")
    if not os.path.isdir(frames_dir):
        raise DatasetError(f"{dataset_dir}: no frames/ directory")
    ids = sorted(int(f.split(".")[0]) for f in os.listdir(frames_dir)
                 if f.endswith(".mmpc"))
    if not ids:
        raise DatasetError(f"{frames_dir}: no .mmpc frames")
    missing = []
    if need_masks:
        for fid in ids:
            for ext in ("png", "json"):
                if not os.path.exists(cloud_io.frame_path(dataset_dir, "masks", fid, ext)):
                    missing.append(fid)
                    break
        if not os.path.exists(os.path.join(dataset_dir, "calib.json")):
            raise DatasetError(f"{dataset_dir}: calib.json missing")
    if missing:
        raise DatasetError(
            f"{dataset_dir}: mask files missing for frames {missing}", missing)
    return ids


def _timestamps(dataset_dir, ids):
    info_path = os.path.join(dataset_dir, "dataset_info.json")
    if os.path.exists(info_path):
        with open(info_path) as f:
            rate = float(json.load(f).get("frame_rate", 10.0))
        return {fid: fid / rate for fid in ids}
    gt_path = os.path.join(dataset_dir, "groundtruth.txt")
    if os.path.exists(gt_path):
        stamps, _ = cloud_io.read_trajectory(gt_path)
        if len(stamps) >= len(ids):
            return {fid: float(stamps[k]) for k, fid in enumerate(ids)}
    return {fid: 0.1 * fid for fid in ids}


def _segment_frame(cloud, seg, cam, cfg, mode):
    """Split one frame into (labeled cloud, static downsampled cloud,
    dynamic cloud, clusters)."""
    if mode == "none":
        labels = np.full(len(cloud), LABEL_STATIC, np.int32)
        labeled = cloud.with_labels(labels)
        down = voxel_downsample(labeled, cfg.fusion_voxel_leaf)
        return labeled, down, labeled.select(np.zeros(0, np.int64)), []

    class_ids = {inst.class_id for inst in seg.instances
                 if inst.class_name in cfg.dynamic_class_names}
    mask = flatten_dynamic(seg, class_ids, cfg.confidence_threshold)
    mask = dilate(mask, cfg.dilation_radius_px)

    if mode == "vision":
        labeled = label_points(cloud, mask, cam)
        static = labeled.select(~is_dynamic(labeled.labels))
        dynamic = labeled.select(is_dynamic(labeled.labels))
        down = voxel_downsample(static, cfg.fusion_voxel_leaf)
        return labeled, down, dynamic, []

    down = voxel_downsample(cloud, cfg.fusion_voxel_leaf)
    down = label_points(down, mask, cam)
    clusters = euclidean_cluster(down, cfg.cluster_tolerance,
                                 cfg.cluster_min_size, cfg.cluster_max_size)
    fo = fuse_labels(down, clusters, cfg.relabel_radius,
                     cfg.dynamic_cluster_threshold)
    down_final = down.with_labels(fo.labels)
    full_labels = propagate_labels(cloud, down_final)
    labeled = cloud.with_labels(full_labels)
    dynamic = labeled.select(is_dynamic(full_labels))
    down_static = down_final.select(~is_dynamic(fo.labels))
    return labeled, down_static, dynamic, fo.clusters


def _instance_classes(dynamic: PointCloud, seg, cam):
    """Majority-vote class id per dynamic instance from the instance masks."""
    if seg is None or len(dynamic) == 0 or dynamic.labels is None:
        return {}
    img = np.zeros((seg.height, seg.width), np.int64)
    class_of_png = {}
    for inst in seg.instances:
        img[inst.bitmap] = inst.instance_id
        class_of_png[inst.instance_id] = inst.class_id
    uv, _, in_view = project_points(cam, dynamic.positions)
    votes = {}
    inst_labels = dynamic.labels - LABEL_DYNAMIC
    px = uv[in_view].astype(np.int64)
    for k, png_id in zip(inst_labels[in_view], img[px[:, 1], px[:, 0]]):
        if png_id > 0:
            key = (int(k), class_of_png[int(png_id)])
            votes[key] = votes.get(key, 0) + 1
    result = {}
    for (k, cid), n in sorted(votes.items()):
        best = result.get(k)
        if best is None or n > best[1]:
            result[k] = (cid, n)
    return {k: cid for k, (cid, n) in result.items()}


def run_pipeline(dataset_dir, cfg: PipelineConfig, mode: str | None = None,
                 out_dir=None, max_frames: int | None = None) -> RunResult:
    """Run the full pipeline over a dataset directory. Returns the trajectory,
    per-frame diagnostics, maps and stage timings; writes the external outputs
    when ``out_dir`` is given."""
    mode = mode or cfg.mode
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    need_masks = mode != "none"
    ids = discover_frames(dataset_dir, need_masks)
    if max_frames is not None:
        ids = ids[:max_frames]
    stamps = _timestamps(dataset_dir, ids)
    cam = None
    calib = os.path.join(dataset_dir, "calib.json")
    if os.path.exists(calib):
        cam = CameraModel.from_json(calib)
    labels_dir = os.path.join(dataset_dir, "labels")
    have_gt_labels = os.path.isdir(labels_dir)

    solver_cfg = _solver_config(cfg)
    local_map = LocalFeatureMap(cfg.feature_voxel_leaf, cfg.local_map_radius)
    static_map = GlobalStaticMap(cfg.map_voxel_leaf)
    result = RunResult(static_map=static_map)
    stage = result.stage_seconds
    for name in ("load", "masks", "fusion", "odometry", "mapping"):
        stage[name] = 0.0

    if out_dir:
        os.makedirs(os.path.join(out_dir, "boxes"), exist_ok=True)

    last_kf_pose = None
    r_thresh = np.deg2rad(cfg.keyframe_rotation_deg)

    for fid in ids:
        t0 = time.perf_counter()
        cloud = cloud_io.read_cloud(
            cloud_io.frame_path(dataset_dir, "frames", fid, "mmpc"),
            frame_id=fid, timestamp=stamps[fid])
        t1 = time.perf_counter()
        stage["load"] += t1 - t0

        seg = None
        if need_masks:
            try:
                seg = load_segmentation(
                    cloud_io.frame_path(dataset_dir, "masks", fid, "png"))
            except (OSError, ValueError) as e:
                raise DatasetError(f"frame {fid}: {e}", [fid])
        t2 = time.perf_counter()
        stage["masks"] += t2 - t1

        labeled, down_static, dynamic, clusters = _segment_frame(
            cloud, seg, cam, cfg, mode)
        t3 = time.perf_counter()
        stage["fusion"] += t3 - t2

        diag = FrameDiagnostics(fid, stamps[fid], n_dynamic=len(dynamic))
        features = extract_features(
            down_static,
            smoothness_radius=cfg.smoothness_radius,
            min_neighbors=cfg.smoothness_min_neighbors,
            edge_threshold=cfg.edge_sigma_threshold,
            planar_threshold=cfg.planar_sigma_threshold,
            sectors=cfg.feature_sectors,
            max_edges_per_sector=cfg.edges_per_sector,
            max_planars_per_sector=cfg.planars_per_sector)

        if len(result.poses) == 0:
            pose = Pose.identity()
        else:
            pose = result.poses[-1]
            if len(result.poses) >= 2:
                motion = result.poses[-2].invert().compose(result.poses[-1])
                pose = result.poses[-1].compose(motion)
            try:
                pose, reg = estimate_pose(features, local_map, pose, solver_cfg)
                diag.iterations = reg.iterations
                diag.cost = reg.final_cost
                diag.edge_inliers = reg.edge_inliers
                diag.planar_inliers = reg.planar_inliers
            except DegenerateRegistration as e:
                pose = e.init_pose
                diag.degenerate = True
        local_map.update(features, pose)
        t4 = time.perf_counter()
        stage["odometry"] += t4 - t3

        if last_kf_pose is None:
            kf = True
        else:
            kf = is_keyframe(pose, last_kf_pose, cfg.keyframe_translation, r_thresh)
        diag.keyframe = kf
        if kf:
            last_kf_pose = pose
            result.keyframes += 1
            static_full = labeled.select(~is_dynamic(labeled.labels))
            static_map.update(static_full, pose, True)
            result.static_inserted += len(static_full)
            if have_gt_labels:
                gt = cloud_io.read_labels(
                    cloud_io.frame_path(dataset_dir, "labels", fid, "bin"))
                if len(gt) != len(cloud):
                    raise DatasetError(
                        f"frame {fid}: label file has {len(gt)} entries for "
                        f"{len(cloud)} points", [fid])
                static_ids = np.nonzero(~is_dynamic(labeled.labels))[0]
                result.gt_dynamic_inserted += int(
                    np.count_nonzero(is_dynamic(gt[static_ids])))
        class_map = _instance_classes(dynamic, seg, cam) if mode == "multimodal" else {}
        snapshot = update_dynamic_map(dynamic, pose, class_map) \
            if mode == "multimodal" else DynamicMapSnapshot(
                transform_cloud(pose, dynamic), [])
        result.last_dynamic = snapshot
        if out_dir:
            write_boxes(os.path.join(out_dir, "boxes", f"{fid:06d}.json"),
                        snapshot.boxes)
        stage["mapping"] += time.perf_counter() - t4

        result.stamps.append(stamps[fid])
        result.poses.append(pose)
        result.diagnostics.append(diag)
        result.frames += 1

    if out_dir:
        _write_outputs(out_dir, result)
    return result


def _write_outputs(out_dir, result: RunResult):
    os.makedirs(out_dir, exist_ok=True)
    cloud_io.write_trajectory(os.path.join(out_dir, "trajectory.txt"),
                              result.stamps, result.poses)
    with open(os.path.join(out_dir, "diagnostics.csv"), "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["frame_id", "timestamp", "iterations", "cost",
                     "edge_inliers", "planar_inliers", "n_dynamic",
                     "degenerate", "keyframe"])
        for d in result.diagnostics:
            wr.writerow([d.frame_id, f"{d.timestamp:.6f}", d.iterations,
                         f"{d.cost:.9g}", d.edge_inliers, d.planar_inliers,
                         d.n_dynamic, int(d.degenerate), int(d.keyframe)])
    cloud_io.write_cloud(os.path.join(out_dir, "static_map.mmpc"),
                         result.static_map.cloud)
    cloud_io.write_cloud_ascii(os.path.join(out_dir, "static_map.xyz"),
                               result.static_map.cloud)
    if result.last_dynamic is not None:
        cloud_io.write_cloud(os.path.join(out_dir, "dynamic_map.mmpc"),
                             result.last_dynamic.cloud)
        cloud_io.write_cloud_ascii(os.path.join(out_dir, "dynamic_map.xyz"),
                                   result.last_dynamic.cloud)
    summary = {
        "frames": result.frames,
        "keyframes": result.keyframes,
        "static_map_points": len(result.static_map),
        "static_inserted": result.static_inserted,
        "gt_dynamic_inserted": result.gt_dynamic_inserted,
        "degenerate_frames": [d.frame_id for d in result.diagnostics if d.degenerate],
        "stage_seconds": {k: round(v, 6) for k, v in result.stage_seconds.items()},
        "hz": round(result.hz, 3),
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=1)
