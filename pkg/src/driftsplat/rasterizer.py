"""Differentiable tile-based splat rasterizer (CPU torch).

Forward model, per pixel p with splats sorted front to back by camera depth:

    C(p) = sum_i c_i tau_i(p) T_i(p) + T_end(p) * background
    tau_i(p) = alpha_i * exp(-0.5 d^T conic_i d),   d = p - mean2d_i
    T_i(p) = prod_{k < i} (1 - tau_k(p))

Compositing terminates once transmittance drops below ``TERMINATE_T``; later
splats get exactly zero contribution and zero gradient. The identity channel
composites per-splat softmax(m) probabilities with the same weights and no
background term, so its two channels always sum to the alpha channel.

Geometry: pixel (row i, col j) is sampled at (j + 0.5, i + 0.5); a splat
contributes to every pixel of every 16x16 tile overlapped by its 3-sigma
screen-space box; splats are culled when their camera depth is at or below
the near plane or the 3-sigma box misses the image.

Gradients come from reverse-mode autograd over this forward graph;
``render_backward`` exposes them under the package's plain-array API and
accumulates view-space positional gradient statistics on the scene.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Union

import numpy as np
import torch

from . import diffmath
from .core import CameraIntrinsics, GaussianScene, PoseSE3

TILE = 16
NEAR_PLANE = 0.01
LOWPASS = 0.3  # px^2, added to the 2d covariance diagonal
TERMINATE_T = 1e-4
CULL_SIGMA = 3.0
CONTRIB_TAU = 1.0 / 255.0  # tau threshold for the diagnostic contributor count


@dataclass
class RenderOutput:
    """Plain-array render result.

    ``contrib_count`` counts splats composited before termination whose tau
    exceeded 1/255 at the pixel (diagnostic only). ``depth`` is the
    alpha-normalized expected camera depth, zero where alpha is zero.
    """

    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W)
    identity: np.ndarray  # (H, W, 2)
    contrib_count: np.ndarray  # (H, W) int32


@dataclass
class RenderGrads:
    """Gradients of a scalar objective w.r.t. every splat parameter group
    and the 6-vector tangent of the world-to-camera pose."""

    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    m: np.ndarray
    pose_tangent: np.ndarray


def render_graph(
    params: Mapping[str, torch.Tensor],
    rot_wc: torch.Tensor,
    t_wc: torch.Tensor,
    intrinsics: CameraIntrinsics,
    background: torch.Tensor,
    sh_degree: int,
) -> dict:
    """Autograd-preserving forward pass.

    params holds means/log_scales/rotations/opacity_logits/sh/m tensors;
    rot_wc, t_wc are the world-to-camera rotation and translation (may carry
    graphs back to a pose tangent). Returns torch tensors plus bookkeeping:
    ``mean2d`` is the retained screen-position intermediate used for
    densification statistics, indexed by ``visible_idx``.
    """
    means = params["means"]
    n = means.shape[0]
    dtype = means.dtype
    h, w = intrinsics.height, intrinsics.width
    fx, fy, cx, cy = (
        torch.as_tensor(v, dtype=dtype) for v in (intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy)
    )

    empty = {
        "color": background.to(dtype).expand(h, w, 3).clone(),
        "alpha": torch.zeros(h, w, dtype=dtype),
        "depth": torch.zeros(h, w, dtype=dtype),
        "identity": torch.zeros(h, w, 2, dtype=dtype),
        "contrib": torch.zeros(h, w, dtype=torch.int32),
        "visible_mask": torch.zeros(n, dtype=torch.bool),
        "visible_idx": torch.zeros(0, dtype=torch.int64),
        "mean2d": torch.zeros(0, 2, dtype=dtype),
    }
    if n == 0:
        return empty

    p_cam = means @ rot_wc.T + t_wc
    z_all = p_cam[:, 2]
    in_front = z_all > NEAR_PLANE

    # conservative first pass in screen space needs z > 0; fully resolved below
    idx0 = in_front.nonzero(as_tuple=False).squeeze(1)
    if idx0.numel() == 0:
        return empty

    pc = p_cam[idx0]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    mean2d = torch.stack([fx * x / z + cx, fy * y / z + cy], dim=1)

    cov3d = diffmath.build_covariance(params["rotations"][idx0], params["log_scales"][idx0])
    cov_cam = rot_wc @ cov3d @ rot_wc.T

    zero = torch.zeros_like(z)
    j_row0 = torch.stack([fx / z, zero, -fx * x / z**2], dim=1)
    j_row1 = torch.stack([zero, fy / z, -fy * y / z**2], dim=1)
    jac = torch.stack([j_row0, j_row1], dim=1)  # (M, 2, 3)
    cov2d = jac @ cov_cam @ jac.transpose(1, 2)
    a = cov2d[:, 0, 0] + LOWPASS
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + LOWPASS

    det = a * c - b * b
    conic_a = c / det
    conic_b = -b / det
    conic_c = a / det

    lam_max = 0.5 * (a + c) + torch.sqrt(torch.clamp(0.25 * (a - c) ** 2 + b * b, min=0.0))
    radius = CULL_SIGMA * torch.sqrt(lam_max)

    mx, my = mean2d[:, 0], mean2d[:, 1]
    on_image = (mx + radius > 0) & (mx - radius < w) & (my + radius > 0) & (my - radius < h)
    keep = on_image.nonzero(as_tuple=False).squeeze(1)
    if keep.numel() == 0:
        return empty

    visible_idx = idx0[keep]
    mean2d = mean2d[keep]
    z = z[keep]
    radius = radius[keep]
    conic = torch.stack([conic_a[keep], conic_b[keep], conic_c[keep]], dim=1)

    cam_center = -(rot_wc.T @ t_wc)
    dirs = means[visible_idx] - cam_center
    dirs = dirs / dirs.norm(dim=1, keepdim=True).clamp_min(1e-12)
    colors = torch.clamp(diffmath.eval_sh(sh_degree, params["sh"][visible_idx], dirs), min=0.0)
    probs = torch.softmax(params["m"][visible_idx], dim=1)
    alphas = torch.sigmoid(params["opacity_logits"][visible_idx])

    # global front-to-back order; stable so equal depths keep index order
    order = torch.argsort(z, stable=True)
    mean2d_s = mean2d[order]
    z_s = z[order]
    radius_s = radius[order]
    conic_s = conic[order]
    colors_s = colors[order]
    probs_s = probs[order]
    alphas_s = alphas[order]

    m_vis = order.shape[0]
    tiles_x = (w + TILE - 1) // TILE
    tiles_y = (h + TILE - 1) // TILE

    with torch.no_grad():
        mxs, mys = mean2d_s[:, 0], mean2d_s[:, 1]
        tx0 = torch.clamp(torch.floor((mxs - radius_s) / TILE).long(), 0, tiles_x - 1)
        tx1 = torch.clamp(torch.floor((mxs + radius_s) / TILE).long(), 0, tiles_x - 1)
        ty0 = torch.clamp(torch.floor((mys - radius_s) / TILE).long(), 0, tiles_y - 1)
        ty1 = torch.clamp(torch.floor((mys + radius_s) / TILE).long(), 0, tiles_y - 1)
        span_x = tx1 - tx0 + 1
        nt = span_x * (ty1 - ty0 + 1)
        total = int(nt.sum())
        splat_of_pair = torch.repeat_interleave(torch.arange(m_vis), nt)
        starts = torch.cumsum(nt, 0) - nt
        local = torch.arange(total) - starts[splat_of_pair]
        sx = span_x[splat_of_pair]
        tile_of_pair = (ty0[splat_of_pair] + local // sx) * tiles_x + (tx0[splat_of_pair] + local % sx)
        # (tile, depth-rank) keys are unique, one argsort groups and orders
        pair_order = torch.argsort(tile_of_pair * m_vis + splat_of_pair)
        sorted_splat = splat_of_pair[pair_order]
        sorted_tile = tile_of_pair[pair_order]
        counts = torch.bincount(sorted_tile, minlength=tiles_x * tiles_y)
        offsets = torch.cumsum(counts, 0) - counts
        occupied = counts.nonzero(as_tuple=False).squeeze(1).tolist()

    xs = torch.arange(w, dtype=dtype) + 0.5
    ys = torch.arange(h, dtype=dtype) + 0.5

    lin_parts = []
    col_parts, alpha_parts, depth_parts, ident_parts, contrib_parts = [], [], [], [], []

    for tile_id in occupied:
        s = int(offsets[tile_id])
        e = s + int(counts[tile_id])
        g = sorted_splat[s:e]
        tix = tile_id % tiles_x
        tiy = tile_id // tiles_x
        x_lo, y_lo = tix * TILE, tiy * TILE
        x_hi, y_hi = min(x_lo + TILE, w), min(y_lo + TILE, h)
        px = xs[x_lo:x_hi]
        py = ys[y_lo:y_hi]
        npx, npy = x_hi - x_lo, y_hi - y_lo
        gx = px.repeat(npy)
        gy = py.repeat_interleave(npx)
        rows = torch.arange(y_lo, y_hi).repeat_interleave(npx)
        cols = torch.arange(x_lo, x_hi).repeat(npy)
        lin = rows * w + cols

        dx = gx.unsqueeze(0) - mean2d_s[g, 0].unsqueeze(1)  # (K, P)
        dy = gy.unsqueeze(0) - mean2d_s[g, 1].unsqueeze(1)
        ca = conic_s[g, 0].unsqueeze(1)
        cb = conic_s[g, 1].unsqueeze(1)
        cc = conic_s[g, 2].unsqueeze(1)
        power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
        tau = alphas_s[g].unsqueeze(1) * torch.exp(power)

        t_incl = torch.cumprod(1.0 - tau, dim=0)
        t_pre = torch.cat([torch.ones(1, tau.shape[1], dtype=dtype), t_incl[:-1]], dim=0)
        active = t_pre >= TERMINATE_T  # bool: termination is not differentiated
        wgt = tau * t_pre * active.to(dtype)

        col_parts.append(torch.einsum("kp,kc->pc", wgt, colors_s[g]))
        alpha_parts.append(wgt.sum(0))
        depth_parts.append((wgt * z_s[g].unsqueeze(1)).sum(0))
        ident_parts.append(torch.einsum("kp,kc->pc", wgt, probs_s[g]))
        contrib_parts.append((active & (tau >= CONTRIB_TAU)).sum(0).to(torch.int32))
        lin_parts.append(lin)

    lin_all = torch.cat(lin_parts)
    color_flat = torch.zeros(h * w, 3, dtype=dtype).index_add(0, lin_all, torch.cat(col_parts))
    alpha_flat = torch.zeros(h * w, dtype=dtype).index_add(0, lin_all, torch.cat(alpha_parts))
    depth_flat = torch.zeros(h * w, dtype=dtype).index_add(0, lin_all, torch.cat(depth_parts))
    ident_flat = torch.zeros(h * w, 2, dtype=dtype).index_add(0, lin_all, torch.cat(ident_parts))
    contrib_flat = torch.zeros(h * w, dtype=torch.int32).index_add(0, lin_all, torch.cat(contrib_parts))

    alpha_img = alpha_flat.view(h, w)
    color = color_flat.view(h, w, 3) + (1.0 - alpha_img).unsqueeze(-1) * background.to(dtype)
    depth = torch.where(
        alpha_img > 0, depth_flat.view(h, w) / alpha_img.clamp_min(1e-300), torch.zeros(h, w, dtype=dtype)
    )

    visible_mask = torch.zeros(n, dtype=torch.bool)
    visible_mask[visible_idx] = True
    return {
        "color": color,
        "alpha": alpha_img,
        "depth": depth,
        "identity": ident_flat.view(h, w, 2),
        "contrib": contrib_flat.view(h, w),
        "visible_mask": visible_mask,
        "visible_idx": visible_idx,
        "mean2d": mean2d,
    }


def _scene_params(scene: GaussianScene, requires_grad: bool = False) -> dict:
    out = {}
    for name in ("means", "log_scales", "rotations", "opacity_logits", "sh", "m"):
        t = getattr(scene, name).detach().clone()
        if requires_grad:
            t.requires_grad_(True)
        out[name] = t
    return out


def _background_tensor(background, dtype) -> torch.Tensor:
    bg = torch.as_tensor(np.asarray(background, dtype=np.float64), dtype=dtype).reshape(3)
    return bg


def render(
    scene: GaussianScene,
    world_to_cam: PoseSE3,
    intrinsics: CameraIntrinsics,
    background=(0.0, 0.0, 0.0),
) -> RenderOutput:
    """Rasterize the scene from a world-to-camera pose.

    Stored trajectories are camera-to-world; invert before calling.
    """
    scene.validate()
    dtype = scene.dtype
    with torch.no_grad():
        out = render_graph(
            _scene_params(scene),
            torch.as_tensor(world_to_cam.rotation, dtype=dtype),
            torch.as_tensor(world_to_cam.translation, dtype=dtype),
            intrinsics,
            _background_tensor(background, dtype),
            scene.sh_degree,
        )
    return RenderOutput(
        color=out["color"].numpy(),
        alpha=out["alpha"].numpy(),
        depth=out["depth"].numpy(),
        identity=out["identity"].numpy(),
        contrib_count=out["contrib"].numpy().astype(np.int32),
    )


def render_backward(
    scene: GaussianScene,
    world_to_cam: PoseSE3,
    intrinsics: CameraIntrinsics,
    cotangents: Union[Mapping[str, Optional[np.ndarray]], RenderOutput],
    background=(0.0, 0.0, 0.0),
) -> RenderGrads:
    """Gradients of sum(cotangent * output) over the given output channels.

    cotangents maps any of color/alpha/depth/identity to an array of that
    channel's shape (missing or None means zero). The pose gradient is taken
    w.r.t. the 6-tangent v at the rendered pose, i.e. d/dv of rendering from
    se3_exp(v) evaluated at v = world_to_cam.tangent. As a side effect the
    view-space positional gradient statistics on the scene are updated for
    every visible splat.
    """
    scene.validate()
    dtype = scene.dtype
    if isinstance(cotangents, RenderOutput):
        cot = {
            "color": cotangents.color,
            "alpha": cotangents.alpha,
            "depth": cotangents.depth,
            "identity": cotangents.identity,
        }
    else:
        cot = dict(cotangents)
    unknown = set(cot) - {"color", "alpha", "depth", "identity"}
    if unknown:
        raise ValueError(f"unknown cotangent channels: {sorted(unknown)}")

    params = _scene_params(scene, requires_grad=True)
    v = torch.as_tensor(world_to_cam.tangent, dtype=dtype).clone().requires_grad_(True)
    rot_wc, t_wc = diffmath.se3_exp(v)
    out = render_graph(params, rot_wc, t_wc, intrinsics, _background_tensor(background, dtype), scene.sh_degree)

    scalar = torch.zeros((), dtype=dtype)
    for key in ("color", "alpha", "depth", "identity"):
        arr = cot.get(key)
        if arr is None:
            continue
        arr_t = torch.as_tensor(np.asarray(arr), dtype=dtype)
        if arr_t.shape != out[key].shape:
            raise ValueError(f"cotangent {key}: expected shape {tuple(out[key].shape)}, got {tuple(arr_t.shape)}")
        scalar = scalar + (arr_t * out[key]).sum()

    inputs = [params[k] for k in ("means", "log_scales", "rotations", "opacity_logits", "sh", "m")]
    inputs.append(v)
    track_mean2d = out["mean2d"].numel() > 0
    if track_mean2d:
        inputs.append(out["mean2d"])
    grads = torch.autograd.grad(scalar, inputs, allow_unused=True)
    grads = [
        g if g is not None else torch.zeros_like(i) for g, i in zip(grads, inputs)
    ]

    if track_mean2d:
        g2d = grads[-1]
        with torch.no_grad():
            vis = out["visible_idx"]
            scene.grad_accum[vis] += g2d.norm(dim=1).to(scene.grad_accum.dtype)
            scene.denom[vis] += 1

    return RenderGrads(
        means=grads[0].numpy(),
        log_scales=grads[1].numpy(),
        rotations=grads[2].numpy(),
        opacity_logits=grads[3].numpy(),
        sh=grads[4].numpy(),
        m=grads[5].numpy(),
        pose_tangent=grads[6].numpy(),
    )
