"""Differentiable structure-and-motion toolkit."""

from ._core import (
    backproject,
    compute_flow,
    endpoint_error,
    generate_scene,
    inverse_warp,
    mask_iou,
    optimize,
    photometric_loss,
    relative_pose_error,
    scale_invariant_log_rmse,
    scene_names,
)

__all__ = [
    "backproject",
    "compute_flow",
    "endpoint_error",
    "generate_scene",
    "inverse_warp",
    "mask_iou",
    "optimize",
    "photometric_loss",
    "relative_pose_error",
    "scale_invariant_log_rmse",
    "scene_names",
]
