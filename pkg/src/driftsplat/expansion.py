"""Incremental reconstruction: bootstrap from a depth frame, then per frame
estimate the relative pose, extend the optimization window, and periodically
densify and prune.

Gradient routing inside each training step:

* photometric term     -> splat geometry and appearance (not identity, not pose)
* identity term        -> identity logits m only
* inter-frame term     -> the 16-dim parameter vector (geometry, appearance, m)
* pose-consistency term-> the newest relative pose tangent only

Anchor snapshots hold one entry per identity-1 splat. They are carried across
densification by index remapping so the stored vectors keep their original
values; splats that lose identity 1 drop out, fresh identity-1 splats enter
with their current vectors.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from . import diffmath, losses, rasterizer
from .core import (
    SH_C0,
    AnchorState,
    CameraIntrinsics,
    Frame,
    GaussianScene,
    PoseSE3,
)
from .losses import LossWeights
from .pose import PoseDivergenceError, PoseEstimateConfig, PoseEstimateResult, estimate_relative_pose

_PARAM_NAMES = ("means", "log_scales", "rotations", "opacity_logits", "sh", "m")
_PHOTO_NAMES = ("means", "log_scales", "rotations", "opacity_logits", "sh")


@dataclass
class ExpansionConfig:
    iters_per_frame: int = 120
    init_iters: int = 500
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    densify_clone_frac: float = 0.01  # scale cutoff: clone below, split above
    split_factor: float = 1.6
    prune_opacity_threshold: float = 0.005
    max_points: int = 200_000
    init_stride: int = 2
    init_opacity: float = 0.1
    sh_degree: int = 3
    window_mode: str = "all"  # "all": sample any seen frame; "pair": newest two
    t_mature: int = 500
    seed: int = 0
    refine_pose: bool = True
    # splitting and cloning perturb geometry, so a pose should never be
    # estimated right after a densification event; densification is deferred
    # unless at least densify_settle optimization steps remain in the phase
    densify_settle: int = 50
    # poses estimated against an immature scene are re-estimated once the
    # frame's optimization phase has run, and again in final sweep rounds
    # against the finished scene; each round re-estimates every pose (warm
    # start) and then re-trains the scene for final_settle_iters under the
    # corrected trajectory, a cheap alternation toward joint consistency
    reestimate_pose: bool = True
    final_pose_sweep: bool = True
    final_sweep_rounds: int = 2
    final_settle_iters: int = 150
    lr_means_frac: float = 1.6e-4  # scaled by scene extent
    lr_sh: float = 2.5e-3
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_m: float = 2.5e-2
    lr_pose: float = 1e-4

    def __post_init__(self):
        if self.window_mode not in ("all", "pair"):
            raise ValueError(f"window_mode must be 'all' or 'pair', got {self.window_mode!r}")
        if self.sh_degree not in (0, 1, 2, 3):
            raise ValueError("sh_degree must be 0..3")
        for name in ("iters_per_frame", "init_iters", "densify_interval", "init_stride", "max_points"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class ReconstructionResult:
    scene: GaussianScene
    trajectory: List[PoseSE3]  # camera-to-world, one per frame
    relative_poses: List[PoseSE3]  # M_i: frame i in frame i-1 coordinates
    loss_history: List[dict]
    pose_results: List[PoseEstimateResult]
    anchors: AnchorState


class ReconstructionError(RuntimeError):
    """Reconstruction aborted; carries the frame index and the partial result."""

    def __init__(self, message: str, frame_index: int, partial: ReconstructionResult):
        super().__init__(message)
        self.frame_index = frame_index
        self.partial = partial


def init_scene_from_frame(
    frame: Frame,
    intrinsics: CameraIntrinsics,
    stride: int = 2,
    sh_degree: int = 3,
    init_opacity: float = 0.1,
    dtype: torch.dtype = torch.float64,
) -> GaussianScene:
    """Bootstrap a scene by unprojecting the first frame's depth map.

    One splat per sampled pixel (every ``stride`` rows/cols), placed on the
    ray through the pixel center, isotropic with a footprint matching the
    sampling stride at that depth. The first camera is the world origin.
    """
    if frame.depth is None:
        raise ValueError("scene bootstrap needs a depth map on the first frame")
    h, w = frame.image.shape[:2]
    rows = np.arange(0, h, stride)
    cols = np.arange(0, w, stride)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr = rr.ravel()
    cc = cc.ravel()
    d = frame.depth[rr, cc]
    valid = d > 0
    if not valid.any():
        raise ValueError("depth map has no positive samples")
    rr, cc, d = rr[valid], cc[valid], d[valid]

    x = (cc + 0.5 - intrinsics.cx) / intrinsics.fx * d
    y = (rr + 0.5 - intrinsics.cy) / intrinsics.fy * d
    means = np.stack([x, y, d], axis=1)

    color = frame.image[rr, cc]
    k = (sh_degree + 1) ** 2
    sh = np.zeros((means.shape[0], k, 3))
    sh[:, 0, :] = (color - 0.5) / SH_C0

    scale = d / intrinsics.fx * stride
    log_scales = np.log(np.maximum(scale, 1e-9))[:, None].repeat(3, axis=1)
    rotations = np.zeros((means.shape[0], 4))
    rotations[:, 0] = 1.0
    opacity = math.log(init_opacity / (1.0 - init_opacity))

    return GaussianScene.from_arrays(
        means=means,
        log_scales=log_scales,
        rotations=rotations,
        opacity_logits=np.full(means.shape[0], opacity),
        sh=sh,
        dtype=dtype,
    )


def scene_extent(scene: GaussianScene) -> float:
    """Radius of the splat-center bounding sphere around the centroid."""
    if len(scene) == 0:
        return 1.0
    mu = scene.means.detach()
    r = float((mu - mu.mean(0)).norm(dim=1).max())
    return r if r > 1e-9 else 1.0


def update_anchors(
    scene: GaussianScene,
    prev: Optional[AnchorState] = None,
    index_map: Optional[torch.Tensor] = None,
    step: int = 0,
) -> AnchorState:
    """One anchor per identity-1 splat; previously anchored survivors keep
    their stored snapshot, newcomers snapshot their current vector."""
    identity = scene.kea_identity()
    idx = identity.nonzero(as_tuple=False).squeeze(1)
    if idx.numel() == 0:
        return AnchorState.empty(scene.dtype)
    vectors = losses.param_vector(scene).detach()[idx].clone()
    created = scene.created_at[idx].clone()
    if prev is not None and len(prev) > 0:
        old_idx = prev.indices
        if index_map is not None:
            old_idx = index_map[old_idx]
        keep = old_idx >= 0
        old_idx = old_idx[keep]
        old_vec = prev.vectors[keep]
        # scatter carried snapshots into the new anchor table where the
        # survivor is still identity-1
        pos_of = torch.full((len(scene),), -1, dtype=torch.int64)
        pos_of[idx] = torch.arange(idx.numel())
        rows = pos_of[old_idx]
        ok = rows >= 0
        vectors[rows[ok]] = old_vec[ok].to(vectors.dtype)
    return AnchorState(indices=idx, vectors=vectors, created_at=created)


def densify_and_prune(
    scene: GaussianScene,
    config: ExpansionConfig,
    step: int,
    generator: torch.Generator,
):
    """Clone small high-gradient splats, split large ones, prune transparent
    ones. Returns (scene, index_map, report); index_map sends old indices to
    new ones (-1 for removed)."""
    n = len(scene)
    mean_grad = torch.where(
        scene.denom > 0, scene.grad_accum / scene.denom.clamp_min(1), torch.zeros_like(scene.grad_accum)
    )
    extent = scene_extent(scene)
    max_scale = torch.exp(scene.log_scales.detach()).max(dim=1).values
    candidate = mean_grad > config.densify_grad_threshold
    if n >= config.max_points:
        candidate = torch.zeros_like(candidate)
    big = max_scale > config.densify_clone_frac * extent
    clone_mask = candidate & ~big
    split_mask = candidate & big

    prune_mask = scene.opacities() < config.prune_opacity_threshold
    keep_mask = ~(prune_mask | split_mask)

    survivors = scene.subset(keep_mask)
    parts = [survivors]

    clone_src = scene.subset(clone_mask & keep_mask)
    if len(clone_src) > 0:
        clone = clone_src.clone()
        clone.created_at = torch.full_like(clone.created_at, step)
        clone.grad_accum.zero_()
        clone.denom.zero_()
        parts.append(clone)

    split_src = scene.subset(split_mask & ~prune_mask)
    if len(split_src) > 0:
        cov = diffmath.build_covariance(split_src.rotations, split_src.log_scales).detach()
        chol = torch.linalg.cholesky(cov + 1e-12 * torch.eye(3, dtype=cov.dtype))
        new_scales = split_src.log_scales - math.log(config.split_factor)
        children = []
        for stamp in (None, step):  # first child keeps the parent's clock
            z = torch.randn(len(split_src), 3, dtype=scene.dtype, generator=generator)
            child = split_src.clone()
            child.means = split_src.means + (chol @ z.unsqueeze(-1)).squeeze(-1)
            child.log_scales = new_scales.clone()
            if stamp is not None:
                child.created_at = torch.full_like(child.created_at, stamp)
            child.grad_accum.zero_()
            child.denom.zero_()
            children.append(child)
        parts.append(children[0].cat(children[1]))

    out = parts[0]
    for p in parts[1:]:
        out = out.cat(p)
    out.grad_accum = torch.zeros(len(out), dtype=out.dtype)
    out.denom = torch.zeros(len(out), dtype=torch.int64)

    index_map = torch.full((n,), -1, dtype=torch.int64)
    index_map[keep_mask] = torch.arange(int(keep_mask.sum()))
    report = {
        "cloned": int(clone_mask.sum()),
        "split": int(split_mask.sum()),
        "pruned": int(prune_mask.sum()),
        "total": len(out),
    }
    return out, index_map, report


def _make_leafs(scene: GaussianScene) -> dict:
    return {name: getattr(scene, name).detach().clone().requires_grad_(True) for name in _PARAM_NAMES}


def _write_back(scene: GaussianScene, leafs: dict) -> None:
    for name in _PARAM_NAMES:
        setattr(scene, name, leafs[name].detach().clone())


def _make_optimizer(leafs: dict, config: ExpansionConfig, extent: float) -> torch.optim.Adam:
    groups = [
        {"params": [leafs["means"]], "lr": config.lr_means_frac * extent},
        {"params": [leafs["log_scales"]], "lr": config.lr_scale},
        {"params": [leafs["rotations"]], "lr": config.lr_rotation},
        {"params": [leafs["opacity_logits"]], "lr": config.lr_opacity},
        {"params": [leafs["sh"]], "lr": config.lr_sh},
        {"params": [leafs["m"]], "lr": config.lr_m},
    ]
    return torch.optim.Adam(groups, eps=1e-15)


def _train_step(
    scene: GaussianScene,
    leafs: dict,
    optimizer: torch.optim.Adam,
    frame: Frame,
    world_to_cam: PoseSE3,
    intrinsics: CameraIntrinsics,
    weights: LossWeights,
    config: ExpansionConfig,
    anchors: AnchorState,
    step: int,
    background: torch.Tensor,
    prev_vectors: Optional[torch.Tensor] = None,
    pose_tangent: Optional[torch.Tensor] = None,
    pose_optimizer: Optional[torch.optim.Adam] = None,
) -> dict:
    """One routed optimization step on one view. Returns loss components."""
    dtype = scene.dtype
    r_wc = torch.as_tensor(world_to_cam.rotation, dtype=dtype)
    t_wc = torch.as_tensor(world_to_cam.translation, dtype=dtype)
    out = rasterizer.render_graph(leafs, r_wc, t_wc, intrinsics, background, scene.sh_degree)
    target = torch.as_tensor(frame.image, dtype=dtype)

    comps: dict = {}
    l_rgb = losses.loss_rgb(out["color"], target, weights.gamma)
    comps["rgb"] = float(l_rgb.detach())

    vectors = None
    main = weights.lambda_rgb * l_rgb
    if weights.lambda_ipc != 0.0 and len(anchors) > 0:
        vectors = losses.param_vector(leafs)
        l_ipc = losses.loss_ipc(scene, anchors, step, config.t_mature, vectors=vectors)
        comps["ipc"] = float(l_ipc.detach())
        main = main + weights.lambda_ipc * l_ipc

    use_kea = weights.lambda_kea != 0.0 and frame.mask is not None
    use_pc = (
        weights.lambda_pc != 0.0
        and pose_tangent is not None
        and prev_vectors is not None
        and pose_optimizer is not None
    )

    for name, value in comps.items():
        if not math.isfinite(value):
            raise ValueError(f"non-finite loss component: {name}")

    photo_inputs = [leafs[k] for k in _PHOTO_NAMES] + [leafs["m"], out["mean2d"]]
    grads = torch.autograd.grad(
        main, photo_inputs, retain_graph=use_kea, allow_unused=True
    )
    g2d = grads[-1]
    with torch.no_grad():
        if g2d is not None:
            vis = out["visible_idx"]
            scene.grad_accum[vis] += g2d.norm(dim=1).to(scene.grad_accum.dtype)
            scene.denom[vis] += 1

    for name, g in zip(list(_PHOTO_NAMES) + ["m"], grads[:-1]):
        if g is not None:
            leafs[name].grad = g.clone()

    if use_kea:
        l_bce = losses.loss_bce(out["identity"], torch.as_tensor(frame.mask, dtype=dtype))
        l_jsd = losses.loss_jsd(
            leafs["m"],
            leafs["means"].detach(),
            num_samples=weights.jsd_samples,
            num_neighbors=weights.jsd_neighbors,
            seed=config.seed + step,
        )
        l_kea = weights.lambda_bce * l_bce + weights.lambda_jsd * l_jsd
        comps["bce"] = float(l_bce.detach())
        comps["jsd"] = float(l_jsd.detach())
        comps["kea"] = float(l_kea.detach())
        if not math.isfinite(comps["kea"]):
            raise ValueError("non-finite loss component: kea")
        (g_m,) = torch.autograd.grad(weights.lambda_kea * l_kea, [leafs["m"]], allow_unused=True)
        if g_m is not None:
            if leafs["m"].grad is None:
                leafs["m"].grad = g_m.clone()
            else:
                leafs["m"].grad = leafs["m"].grad + g_m

    optimizer.step()
    optimizer.zero_grad(set_to_none=True)

    if use_pc:
        cur_vectors = losses.param_vector(leafs).detach()
        l_pc = losses.loss_pc(prev_vectors, cur_vectors, pose_tangent)
        comps["pc"] = float(l_pc.detach())
        if not math.isfinite(comps["pc"]):
            raise ValueError("non-finite loss component: pc")
        (g_v,) = torch.autograd.grad(weights.lambda_pc * l_pc, [pose_tangent], allow_unused=True)
        if g_v is not None:
            pose_tangent.grad = g_v.clone()
            pose_optimizer.step()
            pose_optimizer.zero_grad(set_to_none=True)

    total = weights.lambda_rgb * comps["rgb"]
    if "kea" in comps:
        total += weights.lambda_kea * comps["kea"]
    if "ipc" in comps:
        total += weights.lambda_ipc * comps["ipc"]
    if "pc" in comps:
        total += weights.lambda_pc * comps["pc"]
    comps["total"] = total
    return comps


def optimize_single_view(
    scene: GaussianScene,
    frame: Frame,
    world_to_cam: PoseSE3,
    intrinsics: CameraIntrinsics,
    steps: int,
    weights: Optional[LossWeights] = None,
    config: Optional[ExpansionConfig] = None,
    anchors: Optional[AnchorState] = None,
    background=(0.0, 0.0, 0.0),
    step_offset: int = 0,
) -> List[dict]:
    """Fit the scene to one view in place for ``steps`` iterations.

    No densification and no pose refinement; the bootstrap phase and the
    tests use this directly.
    """
    weights = weights or LossWeights()
    config = config or ExpansionConfig()
    anchors = anchors if anchors is not None else AnchorState.empty(scene.dtype)
    leafs = _make_leafs(scene)
    opt = _make_optimizer(leafs, config, scene_extent(scene))
    bg = torch.as_tensor(np.asarray(background, dtype=np.float64), dtype=scene.dtype).reshape(3)
    history = []
    for k in range(steps):
        comps = _train_step(
            scene, leafs, opt, frame, world_to_cam, intrinsics, weights, config,
            anchors, step_offset + k, bg,
        )
        history.append(comps)
    _write_back(scene, leafs)
    return history


def _refine_pose(scene, prev_c2w, frame, intrinsics, pose_config, init, background):
    """Re-estimate a relative pose against the current scene, warm started.

    Refinement must never destroy an already usable estimate, so a divergence
    here keeps the initial pose instead of raising.
    """
    try:
        res = estimate_relative_pose(
            scene, prev_c2w.inverse(), frame, intrinsics, pose_config,
            init=init, background=background,
        )
    except PoseDivergenceError:
        return init
    return res.pose


def expand_scene(
    frames: Sequence[Frame],
    intrinsics: CameraIntrinsics,
    config: Optional[ExpansionConfig] = None,
    weights: Optional[LossWeights] = None,
    pose_config: Optional[PoseEstimateConfig] = None,
    background=(0.0, 0.0, 0.0),
    dtype: torch.dtype = torch.float64,
    progress: Optional[Callable[[dict], None]] = None,
) -> ReconstructionResult:
    """Reconstruct a scene and trajectory from an ordered frame sequence.

    Frame 0 bootstraps from its depth map and anchors the gauge (identity
    camera-to-world). Every later frame is first localized photometrically
    against the frozen scene, then joins the optimization window. The window
    is sampled uniformly per step over all frames seen so far (or the newest
    two in "pair" mode).
    """
    config = config or ExpansionConfig()
    weights = weights or LossWeights()
    pose_config = pose_config or PoseEstimateConfig()
    if len(frames) == 0:
        raise ValueError("no frames")

    gen = torch.Generator().manual_seed(config.seed)
    torch.manual_seed(config.seed)
    bg = torch.as_tensor(np.asarray(background, dtype=np.float64), dtype=dtype).reshape(3)
    bg_tuple = tuple(np.asarray(background, dtype=np.float64).reshape(3))
    refine_config = dataclasses.replace(
        pose_config, max_iters=max(60, pose_config.max_iters // 2)
    )

    scene = init_scene_from_frame(
        frames[0], intrinsics, config.init_stride, config.sh_degree, config.init_opacity, dtype
    )
    trajectory: List[PoseSE3] = [PoseSE3.identity()]
    relative: List[PoseSE3] = []
    pose_results: List[PoseEstimateResult] = []
    history: List[dict] = []
    anchors = AnchorState.empty(dtype)
    global_step = 0
    last_densify = 0

    def run_phase(n_iters: int, pool_end: int, pose_tangent=None, prev_vectors=None):
        """Optimize for n_iters, sampling frames [0, pool_end)."""
        nonlocal scene, anchors, global_step, last_densify
        leafs = _make_leafs(scene)
        opt = _make_optimizer(leafs, config, scene_extent(scene))
        pose_opt = (
            torch.optim.Adam([pose_tangent], lr=config.lr_pose) if pose_tangent is not None else None
        )
        newest = pool_end - 1
        for it in range(n_iters):
            if config.window_mode == "pair" and pool_end > 1:
                lo = max(0, pool_end - 2)
                fidx = int(torch.randint(lo, pool_end, (1,), generator=gen))
            else:
                fidx = int(torch.randint(0, pool_end, (1,), generator=gen))

            if pose_tangent is not None and fidx == newest:
                m_now = PoseSE3.exp(pose_tangent.detach().cpu().numpy())
                w2c = m_now.inverse().compose(trajectory[newest - 1].inverse())
            else:
                w2c = trajectory[fidx].inverse()

            comps = _train_step(
                scene, leafs, opt, frames[fidx], w2c, intrinsics, weights, config,
                anchors, global_step, bg,
                prev_vectors=prev_vectors if fidx == newest else None,
                pose_tangent=pose_tangent if fidx == newest else None,
                pose_optimizer=pose_opt if fidx == newest else None,
            )
            global_step += 1
            comps.update(step=global_step, frame=fidx, n_gaussians=len(scene))
            history.append(comps)
            if progress is not None:
                progress(dict(comps))

            due = global_step - last_densify >= config.densify_interval
            if due and it + 1 <= n_iters - config.densify_settle:
                _write_back(scene, leafs)
                scene, index_map, report = densify_and_prune(scene, config, global_step, gen)
                anchors = update_anchors(scene, anchors, index_map, global_step)
                leafs = _make_leafs(scene)
                opt = _make_optimizer(leafs, config, scene_extent(scene))
                last_densify = global_step
        _write_back(scene, leafs)

    # bootstrap phase on frame 0
    run_phase(config.init_iters, pool_end=1)
    anchors = update_anchors(scene, anchors, None, global_step)

    for i in range(1, len(frames)):
        init = relative[-1] if relative else None
        try:
            res = estimate_relative_pose(
                scene, trajectory[-1].inverse(), frames[i], intrinsics, pose_config,
                init=init, background=bg_tuple,
            )
        except PoseDivergenceError as err:
            partial = ReconstructionResult(scene, trajectory, relative, history, pose_results, anchors)
            raise ReconstructionError(
                f"pose estimation diverged at frame {i}: {err}", i, partial
            ) from err
        pose_results.append(res)
        m = res.pose
        relative.append(m)
        trajectory.append(trajectory[-1].compose(m))

        prev_vectors = losses.param_vector(scene).detach()
        tangent = None
        if config.refine_pose and weights.lambda_pc != 0.0:
            tangent = torch.as_tensor(m.tangent, dtype=dtype).clone().requires_grad_(True)

        run_phase(config.iters_per_frame, pool_end=i + 1, pose_tangent=tangent, prev_vectors=prev_vectors)

        if tangent is not None:
            m = PoseSE3.exp(tangent.detach().cpu().numpy())
            relative[-1] = m
            trajectory[-1] = trajectory[-2].compose(m)

        if config.reestimate_pose:
            m = _refine_pose(scene, trajectory[-2], frames[i], intrinsics, refine_config, m, bg_tuple)
            relative[-1] = m
            trajectory[-1] = trajectory[-2].compose(m)
        anchors = update_anchors(scene, anchors, None, global_step)

    if config.final_pose_sweep and len(frames) > 1:
        for round_idx in range(max(1, config.final_sweep_rounds)):
            for i in range(1, len(frames)):
                m = _refine_pose(
                    scene, trajectory[i - 1], frames[i], intrinsics, pose_config,
                    relative[i - 1], bg_tuple,
                )
                relative[i - 1] = m
                trajectory[i] = trajectory[i - 1].compose(m)
            last_round = round_idx == max(1, config.final_sweep_rounds) - 1
            if not last_round and config.final_settle_iters > 0:
                run_phase(config.final_settle_iters, pool_end=len(frames))
        anchors = update_anchors(scene, anchors, None, global_step)

    return ReconstructionResult(scene, trajectory, relative, history, pose_results, anchors)
