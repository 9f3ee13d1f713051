"""LiDAR-camera extrinsic calibration from depth-map and point-cloud losses."""

from .camera import KITTI_HALF, CameraIntrinsics, PointCloud
from .depthmap import SparseDepthMap
from .lie import RigidTransform, Se3Params, compose, exp_so3, inverse, log_so3, to_transform
from .losses import LossWeights
from .solver import SolverConfig, SolverReport, Stage, calibrate

__all__ = [
    "KITTI_HALF",
    "CameraIntrinsics",
    "LossWeights",
    "PointCloud",
    "RigidTransform",
    "Se3Params",
    "SolverConfig",
    "SolverReport",
    "SparseDepthMap",
    "Stage",
    "calibrate",
    "compose",
    "exp_so3",
    "inverse",
    "log_so3",
    "to_transform",
]

__version__ = "0.1.0"
