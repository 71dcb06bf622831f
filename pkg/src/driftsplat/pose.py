"""Photometric relative-pose estimation against a frozen scene.

The relative pose M is the new camera's pose expressed in the previous
camera's frame: cam2world_new = cam2world_prev . M, equivalently
world2cam_new = M^-1 . world2cam_prev. Estimation minimizes the photometric
loss between the frozen scene rendered at world2cam_new(M) and the new frame,
over the 6-tangent of M.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch

from . import diffmath, losses, rasterizer
from .core import CameraIntrinsics, Frame, GaussianScene, PoseSE3


class PoseDivergenceError(RuntimeError):
    """Raised when the photometric objective stops being optimizable."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


@dataclass
class PoseEstimateConfig:
    max_iters: int = 300
    lr: float = 1e-3
    lr_decay: float = 0.998  # per-iteration multiplier; damps step oscillation
    convergence_tol: float = 1e-6  # relative loss change ...
    convergence_window: int = 10  # ... over this many iterations
    gamma: float = 0.2  # structural share of the photometric loss
    mask_kea: bool = False  # restrict the loss to pixels outside the edit mask
    # trust checkpoints: every trust_window iterations the loss must not have
    # risen more than trust_increase over the checkpoint, else roll back to the
    # best tangent and halve the step size. Windowed, because a healthy run
    # oscillates transiently between single steps.
    trust_window: int = 25
    trust_increase: float = 0.10
    max_rejections: int = 8  # consecutive failed windows, not lifetime total
    loss_floor: float = 1e-10  # a numerically perfect fit; stop immediately
    probe_delta: float = 1e-3  # low-confidence flatness probe offset
    probe_tol: float = 1e-6


@dataclass
class PoseEstimateResult:
    pose: PoseSE3  # relative pose M (new camera in previous camera's frame)
    final_loss: float
    iterations: int
    low_confidence: bool
    loss_history: List[float] = field(default_factory=list)


def _masked_l1(pred: torch.Tensor, target: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    diff = (pred - target).abs().sum(-1)
    total = keep.sum().clamp_min(1.0) * pred.shape[-1]
    return (diff * keep).sum() / total


def estimate_relative_pose(
    scene: GaussianScene,
    prev_world_to_cam: PoseSE3,
    frame: Frame,
    intrinsics: CameraIntrinsics,
    config: Optional[PoseEstimateConfig] = None,
    init: Optional[PoseSE3] = None,
    background=(0.0, 0.0, 0.0),
) -> PoseEstimateResult:
    """Recover the relative pose of ``frame`` w.r.t. the previous camera.

    The scene is read-only here: its tensors are detached before rendering
    and are never written. ``init`` seeds the search (constant-velocity prior
    from the caller); identity when absent. With ``config.mask_kea`` the
    photometric term is plain L1 over pixels outside ``frame.mask``, since
    edited regions should not steer the camera.

    Raises PoseDivergenceError when the loss goes non-finite or every trust
    rollback is exhausted.
    """
    cfg = config or PoseEstimateConfig()
    scene.validate()
    dtype = scene.dtype
    params = {
        name: getattr(scene, name).detach()
        for name in ("means", "log_scales", "rotations", "opacity_logits", "sh", "m")
    }
    target = torch.as_tensor(frame.image, dtype=dtype)
    bg = torch.as_tensor(np.asarray(background, dtype=np.float64), dtype=dtype).reshape(3)

    keep = None
    if cfg.mask_kea:
        if frame.mask is None:
            raise ValueError("mask_kea requested but the frame has no mask")
        keep = torch.as_tensor(1.0 - frame.mask, dtype=dtype)

    r_prev = torch.as_tensor(prev_world_to_cam.rotation, dtype=dtype)
    t_prev = torch.as_tensor(prev_world_to_cam.translation, dtype=dtype)

    v0 = init.tangent if init is not None else np.zeros(6)
    v = torch.as_tensor(v0, dtype=dtype).clone().requires_grad_(True)

    def compute_loss(tangent: torch.Tensor) -> torch.Tensor:
        rot_m, t_m = diffmath.se3_exp(tangent)
        # world2cam_new = M^-1 . world2cam_prev
        r_wc = rot_m.T @ r_prev
        t_wc = rot_m.T @ (t_prev - t_m)
        out = rasterizer.render_graph(params, r_wc, t_wc, intrinsics, bg, scene.sh_degree)
        if keep is not None:
            return _masked_l1(out["color"], target, keep)
        return losses.loss_rgb(out["color"], target, cfg.gamma)

    lr = cfg.lr
    opt = torch.optim.Adam([v], lr=lr)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=cfg.lr_decay)
    history: List[float] = []
    best_v = v.detach().clone()
    best_loss = math.inf
    checkpoint = math.inf
    rejections = 0
    iterations = 0

    for it in range(cfg.max_iters):
        iterations = it + 1
        opt.zero_grad()
        loss = compute_loss(v)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise PoseDivergenceError(f"non-finite pose loss at iteration {it}", it)

        history.append(value)
        if value < best_loss:
            best_loss = value
            best_v = v.detach().clone()
        if best_loss < cfg.loss_floor:
            break

        if it % cfg.trust_window == 0:
            if value > checkpoint * (1.0 + cfg.trust_increase):
                rejections += 1
                if rejections > cfg.max_rejections:
                    raise PoseDivergenceError(
                        f"pose optimization diverged after {rejections} trust rollbacks", it
                    )
                with torch.no_grad():
                    v.copy_(best_v)
                lr = lr * 0.5
                opt = torch.optim.Adam([v], lr=lr)
                sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=cfg.lr_decay)
                checkpoint = best_loss
                continue
            rejections = 0
            checkpoint = min(checkpoint, value)

        if len(history) > cfg.convergence_window:
            ref = history[-cfg.convergence_window - 1]
            if abs(ref - value) / max(ref, 1e-12) < cfg.convergence_tol:
                break

        if not loss.requires_grad:
            # nothing visible depends on the pose (e.g. every splat culled);
            # keep the current tangent and let the flatness probe flag it
            break
        loss.backward()
        opt.step()
        sched.step()

    with torch.no_grad():
        final_loss = float(compute_loss(best_v))

    low_confidence = _flatness_probe(compute_loss, best_v, final_loss, cfg)
    pose = PoseSE3.exp(best_v.detach().cpu().numpy())
    return PoseEstimateResult(
        pose=pose,
        final_loss=final_loss,
        iterations=iterations,
        low_confidence=low_confidence,
        loss_history=history,
    )


def _flatness_probe(compute_loss, v_star: torch.Tensor, loss_star: float, cfg: PoseEstimateConfig) -> bool:
    """True when the objective is flat along every tangent axis around the
    optimum, i.e. the image carries no usable alignment signal."""
    with torch.no_grad():
        for axis in range(6):
            for sign in (1.0, -1.0):
                probe = v_star.clone()
                probe[axis] += sign * cfg.probe_delta
                rel = abs(float(compute_loss(probe)) - loss_star) / (abs(loss_star) + 1e-12)
                if rel > cfg.probe_tol:
                    return False
    return True
