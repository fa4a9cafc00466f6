"""Narrow-baseline single-view novel view synthesis.

A source RGBD frame and a relative camera pose go in; a target view comes
out as the blend of learnably-warped source content and predicted
inpainting, with the conventional depth-based warper supplying training
labels on the fly.
"""

from .compositor import synthesize
from .geometry import (
    BehindCameraError,
    Extrinsics,
    Intrinsics,
    PoseSamplerConfig,
    project,
    sample_pose,
    transform_point,
    unproject,
)
from .metrics import evaluate, iou, psnr, ssim
from .model import ModelConfig, NVSModel, load_checkpoint, save_checkpoint
from .teachers import mean_fill, neighborhood_fill
from .training import LossSchedule, TrainConfig, fit, lambda_schedule, loss_total, train_step
from .warp import RGBDFrame, TrainingSample, WarpLabels, forward_warp, grid_sample, make_labels

__all__ = [
    "BehindCameraError",
    "Extrinsics",
    "Intrinsics",
    "LossSchedule",
    "ModelConfig",
    "NVSModel",
    "PoseSamplerConfig",
    "RGBDFrame",
    "TrainConfig",
    "TrainingSample",
    "WarpLabels",
    "evaluate",
    "fit",
    "forward_warp",
    "grid_sample",
    "iou",
    "lambda_schedule",
    "load_checkpoint",
    "loss_total",
    "make_labels",
    "mean_fill",
    "neighborhood_fill",
    "project",
    "psnr",
    "sample_pose",
    "save_checkpoint",
    "ssim",
    "synthesize",
    "train_step",
    "transform_point",
    "unproject",
]

__version__ = "0.1.0"
