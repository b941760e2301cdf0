"""Differentiable Gaussian splatting with mirror reflections via virtual cameras."""

from .scene import (Camera, CameraExtrinsics, CameraIntrinsics, Gaussian, GaussianScene, MirrorDatasetView,
                    Plane, RenderOutput, build_covariance, shortest_axis_normal, validate_scene)
from .rasterizer import blend_weight, evaluate_sh, project_gaussian, render, render_bruteforce
from .gradients import backward_pose, backward_scene, finite_diff_check
from .mirror import (PlaneEstimate, backproject, estimate_plane, fuse_images, reflect_extrinsics,
                     reflect_point, reflect_scene, virtual_camera)
from .losses import (LossBreakdown, loss_normal, loss_planar, loss_rgb, loss_smooth, loss_vco, mask_fill,
                     pseudo_normal, psnr, ssim)
from .data import SyntheticSceneSpec, generate_synthetic, load_dataset, read_image, write_image
from .trainer import StageSchedule, TrainConfig, run_training

__all__ = [
    "Camera", "CameraExtrinsics", "CameraIntrinsics", "Gaussian", "GaussianScene", "MirrorDatasetView",
    "Plane", "RenderOutput", "build_covariance", "shortest_axis_normal", "validate_scene",
    "blend_weight", "evaluate_sh", "project_gaussian", "render", "render_bruteforce",
    "backward_pose", "backward_scene", "finite_diff_check",
    "PlaneEstimate", "backproject", "estimate_plane", "fuse_images", "reflect_extrinsics",
    "reflect_point", "reflect_scene", "virtual_camera",
    "LossBreakdown", "loss_normal", "loss_planar", "loss_rgb", "loss_smooth", "loss_vco", "mask_fill",
    "pseudo_normal", "psnr", "ssim",
    "SyntheticSceneSpec", "generate_synthetic", "load_dataset", "read_image", "write_image",
    "StageSchedule", "TrainConfig", "run_training",
]
