"""Incremental Gaussian-splat reconstruction with identity-aware editing."""

from driftsplat.core import (
    AnchorState,
    CameraIntrinsics,
    Frame,
    Gaussian,
    GaussianScene,
    PoseSE3,
)
from driftsplat.rasterizer import RenderGrads, RenderOutput, render, render_backward
from driftsplat.pose import PoseEstimateConfig, PoseEstimateResult, estimate_relative_pose
from driftsplat.expansion import ExpansionConfig, ReconstructionResult, expand_scene
from driftsplat.losses import LossWeights, total_loss
from driftsplat.blend import BlendConfig, SyntheticDenoiser, autoregressive_edit

__version__ = "0.1.0"

__all__ = [
    "AnchorState",
    "BlendConfig",
    "CameraIntrinsics",
    "ExpansionConfig",
    "Frame",
    "Gaussian",
    "GaussianScene",
    "LossWeights",
    "PoseEstimateConfig",
    "PoseEstimateResult",
    "PoseSE3",
    "ReconstructionResult",
    "RenderGrads",
    "RenderOutput",
    "SyntheticDenoiser",
    "autoregressive_edit",
    "estimate_relative_pose",
    "expand_scene",
    "render",
    "render_backward",
    "total_loss",
    "__version__",
]
