"""Self-supervised depth/normal objectives, a procedural colon renderer and tools around them."""

__version__ = "0.1.0"

from .differentiation import GradientBundle, check_gradients, fd_gradient, grad_total_loss
from .estimators import DepthRefiner, DepthSequence, WindowedDepthAverager, check_sequence
from .fusion import PointCloud, fuse_pointcloud, windowed_depth_average
from .geometry import (
    Intrinsics,
    PoseSE3,
    backproject,
    bilinear_sample,
    normals_from_depth,
    project_pixel,
    relative_pose,
    warp_image,
)
from .metrics import DepthMetrics, compute_metrics, median_scale
from .objectives import (
    FramePair,
    LossBreakdown,
    LossWeights,
    auto_mask,
    depth_consistency_loss,
    feature_extract,
    feature_loss,
    normal_consistency_loss,
    orthogonality_loss,
    photometric_loss,
    smoothness_loss,
    specular_mask,
    ssim,
    surface_vectors,
    total_loss,
)
from .refine import RefineConfig, RefineReport, refine_pair, refine_sequence
from .synthcolon import RenderedFrame, SceneConfig, render_frame, render_sequence

__all__ = [
    "DepthMetrics",
    "DepthRefiner",
    "DepthSequence",
    "FramePair",
    "GradientBundle",
    "Intrinsics",
    "LossBreakdown",
    "LossWeights",
    "PointCloud",
    "PoseSE3",
    "RefineConfig",
    "RefineReport",
    "RenderedFrame",
    "SceneConfig",
    "WindowedDepthAverager",
    "auto_mask",
    "backproject",
    "bilinear_sample",
    "check_gradients",
    "check_sequence",
    "compute_metrics",
    "depth_consistency_loss",
    "fd_gradient",
    "feature_extract",
    "feature_loss",
    "fuse_pointcloud",
    "grad_total_loss",
    "median_scale",
    "normal_consistency_loss",
    "normals_from_depth",
    "orthogonality_loss",
    "photometric_loss",
    "project_pixel",
    "refine_pair",
    "refine_sequence",
    "relative_pose",
    "render_frame",
    "render_sequence",
    "smoothness_loss",
    "specular_mask",
    "ssim",
    "surface_vectors",
    "total_loss",
    "warp_image",
    "windowed_depth_average",
]
