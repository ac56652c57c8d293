"""Dynamic-object-aware LiDAR odometry and mapping.

Fuses per-frame instance masks with point-cloud clustering to strip moving
objects before scan registration, keeping a drift-resistant trajectory, a
clean colored static map and an instantaneous dynamic-object map. Ships with
a deterministic room-scale simulator that provides the ground truth for the
drift ablation.
"""

from .config import PipelineConfig
from .evaluate import DriftReport, compute_drift, evaluate_files
from .fusion import (CameraModel, Cluster, FusionOutput, euclidean_cluster,
                     fuse_labels, label_points, project_point, project_points)
from .geometry import (LABEL_DYNAMIC, LABEL_STATIC, LABEL_UNLABELED,
                       PointCloud, Pose, SpatialIndex, Twist, build_index,
                       se3_exp, se3_log, transform_cloud, voxel_downsample)
from .masks import (InstanceMask, SegmentationResult, dilate, flatten_dynamic,
                    load_segmentation)
from .odometry import (DegenerateRegistration, FeatureSet, LocalFeatureMap,
                       SolverFailure, compute_smoothness, estimate_pose,
                       extract_features, is_keyframe, residual_edge,
                       residual_plane)
from .mapping import DynamicObjectBox, GlobalStaticMap, update_dynamic_map
from .pipeline import run_pipeline

__version__ = "0.1.0"
