"""Stereo 3D box toolkit.

Instance depth from local plane-sweep cost volumes, geometric box pose
recovery and dense photometric alignment, KITTI-format I/O, rotated-box
BEV/3D average precision, and a deterministic synthetic stereo scene
oracle that verifies all of it.
"""

from .geometry import (
    Box3D,
    CameraRig,
    CornerType,
    DepthGrid,
    Measurements5,
    Rect,
    StereoBoxPair,
    depth_from_disparity,
    disparity_from_depth,
    project_box,
    uniform_depth_grid,
)
from .costvol import CostVolume, DepthPMF, build_cost_volume, expected_depth, match_scores
from .solver import GNConfig, VisibleRange, dense_align, estimate_box_pose
from .kitti import CalibBundle, Difficulty, ObjectRecord, parse_calib, parse_labels
from .evaluation import BevBox, average_precision, bev_iou, iou3d
from .synth import SceneSpec, generate_scene, oracle_features, render_stereo

__version__ = "0.1.0"

__all__ = [
    "Box3D",
    "CameraRig",
    "CornerType",
    "DepthGrid",
    "Measurements5",
    "Rect",
    "StereoBoxPair",
    "depth_from_disparity",
    "disparity_from_depth",
    "project_box",
    "uniform_depth_grid",
    "CostVolume",
    "DepthPMF",
    "build_cost_volume",
    "expected_depth",
    "match_scores",
    "GNConfig",
    "VisibleRange",
    "dense_align",
    "estimate_box_pose",
    "CalibBundle",
    "Difficulty",
    "ObjectRecord",
    "parse_calib",
    "parse_labels",
    "BevBox",
    "average_precision",
    "bev_iou",
    "iou3d",
    "SceneSpec",
    "generate_scene",
    "oracle_features",
    "render_stereo",
    "__version__",
]
