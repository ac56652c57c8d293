"""Pipeline configuration: one flat, documented key-value (YAML) file. Unknown
keys are rejected so typos cannot silently fall back to defaults."""

from dataclasses import dataclass, fields

import yaml


class ConfigError(ValueError):
    pass


def require_keys(d: dict, allowed, context: str, required=()):
    """Reject unknown keys and report missing required ones."""
    if d is None:
        d = {}
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    missing = set(required) - set(d)
    if missing:
        raise ConfigError(f"{context}: missing keys {sorted(missing)}")


MODES = ("none", "vision", "multimodal")


@dataclass
class PipelineConfig:
    """Every tunable of the per-frame pipeline. Units: meters/radians unless a
    key name says otherwise."""

    seed: int = 0
    mode: str = "multimodal"  # none | vision | multimodal

    # mask handling
    dynamic_class_names: tuple = ("person", "agv")
    confidence_threshold: float = 0.5
    dilation_radius_px: int = 3

    # fusion
    fusion_voxel_leaf: float = 0.08
    cluster_tolerance: float = 0.3
    cluster_min_size: int = 20
    cluster_max_size: int = 50000
    relabel_radius: float = 0.3
    dynamic_cluster_threshold: float = 0.9

    # odometry features
    smoothness_radius: float = 0.5
    smoothness_min_neighbors: int = 4
    edge_sigma_threshold: float = 0.05
    planar_sigma_threshold: float = 0.01
    feature_sectors: int = 6
    edges_per_sector: int = 10
    planars_per_sector: int = 60

    # odometry solver
    max_iterations: int = 20
    convergence_delta: float = 1.0e-6
    outlier_gate: float = 1.0
    outlier_gate_tight: float = 0.5
    outlier_gate_tighten_after: int = 3
    knn_max_distance: float = 1.0
    min_map_edges: int = 10
    min_map_planars: int = 30
    min_correspondences: int = 10

    # local feature map
    feature_voxel_leaf: float = 0.05
    local_map_radius: float = 30.0

    # keyframes and global map
    keyframe_translation: float = 0.3
    keyframe_rotation_deg: float = 10.0
    map_voxel_leaf: float = 0.05

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.dynamic_class_names = tuple(self.dynamic_class_names)
        if not 0.0 < self.dynamic_cluster_threshold <= 1.0:
            raise ConfigError("dynamic_cluster_threshold must be in (0, 1]")
        for key in ("fusion_voxel_leaf", "cluster_tolerance", "smoothness_radius",
                    "feature_voxel_leaf", "local_map_radius", "map_voxel_leaf",
                    "keyframe_translation", "keyframe_rotation_deg"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be > 0")

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        names = {f.name for f in fields(PipelineConfig)}
        require_keys(d or {}, names, "pipeline config")
        return PipelineConfig(**(d or {}))

    @staticmethod
    def from_yaml(path) -> "PipelineConfig":
        with open(path) as f:
            d = yaml.safe_load(f)
        if d is None:
            d = {}
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: pipeline config must be a mapping")
        return PipelineConfig.from_dict(d)

    def to_yaml(self, path):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["dynamic_class_names"] = list(self.dynamic_class_names)
        with open(path, "w") as f:
            yaml.safe_dump(d, f, sort_keys=False)
