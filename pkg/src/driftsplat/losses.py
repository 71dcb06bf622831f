"""Training objectives: photometric, identity, and consistency terms.

All loss functions return torch scalars and preserve autograd graphs of any
tensor inputs; plain arrays are accepted and converted. Gradient routing
(which parameters each term is allowed to update) is the training loop's
job, see ``expansion``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import cKDTree

from . import diffmath
from .core import AnchorState, GaussianScene

_LOG_EPS = 1e-12


@dataclass
class LossWeights:
    """Weights and knobs of the combined objective."""

    gamma: float = 0.2  # structural term share inside the photometric loss
    lambda_rgb: float = 1.0
    lambda_kea: float = 0.5
    lambda_ipc: float = 0.1
    lambda_pc: float = 0.05
    lambda_bce: float = 1.0  # inside the identity term
    lambda_jsd: float = 0.1  # inside the identity term
    jsd_samples: int = 1024
    jsd_neighbors: int = 5


def _as_tensor(x, like: Optional[torch.Tensor] = None) -> torch.Tensor:
    if torch.is_tensor(x):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _gaussian_window(size: int, sigma: float, dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return g.outer(g)


def ssim(
    img_a,
    img_b,
    window_size: int = 11,
    sigma: float = 1.5,
    c1: float = 0.01**2,
    c2: float = 0.03**2,
) -> torch.Tensor:
    """Mean structural similarity with a Gaussian window, data range 1.

    Valid-mode convolution: the window never reads outside the image, so a
    pair of constant images gives the closed-form value exactly. Images
    smaller than the window are rejected.
    """
    a = _as_tensor(img_a)
    b = _as_tensor(img_b, like=a)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 2:
        a = a.unsqueeze(-1)
        b = b.unsqueeze(-1)
    if a.ndim != 3:
        raise ValueError("expected (H, W) or (H, W, C) images")
    h, w, ch = a.shape
    if h < window_size or w < window_size:
        raise ValueError(f"image {h}x{w} smaller than ssim window {window_size}")

    win = _gaussian_window(window_size, sigma, a.dtype).expand(ch, 1, window_size, window_size)
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)

    def filt(t):
        return F.conv2d(t, win, groups=ch)

    mu_x = filt(x)
    mu_y = filt(y)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    sig_x = filt(x * x) - mu_xx
    sig_y = filt(y * y) - mu_yy
    sig_xy = filt(x * y) - mu_xy

    num = (2.0 * mu_xy + c1) * (2.0 * sig_xy + c2)
    den = (mu_xx + mu_yy + c1) * (sig_x + sig_y + c2)
    return (num / den).mean()


def loss_rgb(pred, target, gamma: float = 0.2) -> torch.Tensor:
    """(1 - gamma) * L1 + gamma * (1 - SSIM) / 2."""
    p = _as_tensor(pred)
    t = _as_tensor(target, like=p)
    if p.shape != t.shape:
        raise ValueError(f"image shapes differ: {tuple(p.shape)} vs {tuple(t.shape)}")
    l1 = (p - t).abs().mean()
    if gamma == 0.0:
        return l1
    dssim = (1.0 - ssim(p, t)) / 2.0
    return (1.0 - gamma) * l1 + gamma * dssim


def loss_bce(identity, mask) -> torch.Tensor:
    """Binary cross-entropy of the rendered identity channel against a mask.

    The two identity channels sum to the pixel alpha, not to one, so they are
    renormalized with a symmetric epsilon; empty pixels read as p = 0.5
    exactly, giving ln 2 against any label.
    """
    ident = _as_tensor(identity)
    msk = _as_tensor(mask, like=ident)
    if ident.ndim != 3 or ident.shape[-1] != 2:
        raise ValueError(f"identity must be (H, W, 2), got {tuple(ident.shape)}")
    if msk.shape != ident.shape[:2]:
        raise ValueError("mask shape does not match identity render")
    p = (ident[..., 1] + 0.5 * _LOG_EPS) / (ident.sum(-1) + _LOG_EPS)
    p = p.clamp(_LOG_EPS, 1.0 - _LOG_EPS)
    return -(msk * torch.log(p) + (1.0 - msk) * torch.log(1.0 - p)).mean()


def loss_jsd(
    scene_or_m: Union[GaussianScene, torch.Tensor],
    means: Optional[torch.Tensor] = None,
    num_samples: int = 1024,
    num_neighbors: int = 5,
    seed: int = 0,
) -> torch.Tensor:
    """Mean Jensen-Shannon divergence between each sampled splat's identity
    distribution and the average distribution of its nearest neighbors.

    Neighborhoods are Euclidean in splat-center space, restricted to the
    sampled subset. Natural log, so the value lies in [0, ln 2].
    """
    if isinstance(scene_or_m, GaussianScene):
        m = scene_or_m.m
        mu = scene_or_m.means
    else:
        m = scene_or_m
        if means is None:
            raise ValueError("means required when passing raw identity logits")
        mu = _as_tensor(means, like=m)
    n = m.shape[0]
    if n < 2:
        raise ValueError("identity smoothness needs at least 2 splats")

    if n > num_samples:
        gen = torch.Generator().manual_seed(seed)
        sample = torch.randperm(n, generator=gen)[:num_samples]
    else:
        sample = torch.arange(n)

    mu_np = mu.detach()[sample].cpu().numpy()
    k = min(num_neighbors + 1, sample.shape[0])
    _, nn_idx = cKDTree(mu_np).query(mu_np, k=k)
    nn_idx = torch.as_tensor(nn_idx[:, 1:], dtype=torch.int64)  # drop self column

    probs = torch.softmax(m[sample], dim=1)
    q = probs[nn_idx].mean(dim=1)  # (S, 2)
    mid = 0.5 * (probs + q)

    def kl(a, b):
        return (a * (torch.log(a.clamp_min(_LOG_EPS)) - torch.log(b.clamp_min(_LOG_EPS)))).sum(-1)

    return (0.5 * kl(probs, mid) + 0.5 * kl(q, mid)).mean()


def loss_kea(identity, mask, scene, weights: LossWeights, seed: int = 0) -> torch.Tensor:
    """Identity objective: weighted BCE against the mask plus the neighbor
    smoothness term."""
    value = weights.lambda_bce * loss_bce(identity, mask)
    if weights.lambda_jsd != 0.0:
        value = value + weights.lambda_jsd * loss_jsd(
            scene, num_samples=weights.jsd_samples, num_neighbors=weights.jsd_neighbors, seed=seed
        )
    return value


# ---------------------------------------------------------------------------
# parameter-space consistency terms


def param_vector(source: Union[GaussianScene, Mapping[str, torch.Tensor]]) -> torch.Tensor:
    """Normalized 16-dim per-splat parameter vector.

    Layout: center (3), linear scales exp(log_scale) (3), unit quaternion with
    non-negative scalar part (4), opacity sigmoid (1), DC color coefficients
    (3), identity softmax (2).
    """
    get = (lambda k: getattr(source, k)) if isinstance(source, GaussianScene) else source.__getitem__
    quat = diffmath.quat_canonical(get("rotations"))
    return torch.cat(
        [
            get("means"),
            torch.exp(get("log_scales")),
            quat,
            torch.sigmoid(get("opacity_logits")).unsqueeze(-1),
            get("sh")[:, 0, :],
            torch.softmax(get("m"), dim=-1),
        ],
        dim=-1,
    )


def transform_param_vectors(vectors: torch.Tensor, rot: torch.Tensor, trans: torch.Tensor) -> torch.Tensor:
    """Rigidly move the splats a parameter-vector batch describes.

    Centers are rotated and translated, orientations are composed with the
    rotation; scales, opacity, color, and identity are motion invariants.
    """
    mu = vectors[:, 0:3] @ rot.T + trans
    q_rot = _rotmat_to_quat_torch(rot)
    quat = diffmath.quat_canonical(diffmath.quat_multiply(q_rot.expand(vectors.shape[0], 4), vectors[:, 6:10]))
    return torch.cat([mu, vectors[:, 3:6], quat, vectors[:, 10:]], dim=-1)


def _rotmat_to_quat_torch(rot: torch.Tensor) -> torch.Tensor:
    """Differentiable rotation-matrix to quaternion, scalar part >= 0.

    The trace branch assumes the input is a proper rotation not too close to
    a half turn, which holds for the small inter-frame motions this package
    optimizes; the numpy converter in ``core`` covers the general case.
    """
    t = rot.diagonal(dim1=-2, dim2=-1).sum(-1)
    r = torch.sqrt((1.0 + t).clamp_min(_LOG_EPS))
    s = 0.5 / r
    q = torch.stack(
        [0.5 * r, (rot[2, 1] - rot[1, 2]) * s, (rot[0, 2] - rot[2, 0]) * s, (rot[1, 0] - rot[0, 1]) * s]
    )
    return q / q.norm()


def chamfer(vec_a: torch.Tensor, vec_b: torch.Tensor) -> torch.Tensor:
    """Symmetric Chamfer distance over parameter vectors.

    Nearest neighbors are matched in center space (first three dims); the
    summed quantity is the full squared parameter-vector distance. Both
    directions are averaged within themselves and then added.
    """
    a = _as_tensor(vec_a)
    b = _as_tensor(vec_b, like=a)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("parameter-vector batches must be (N, D) with equal D")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer distance of an empty set")
    tree_b = cKDTree(b.detach()[:, :3].cpu().numpy())
    tree_a = cKDTree(a.detach()[:, :3].cpu().numpy())
    _, idx_ab = tree_b.query(a.detach()[:, :3].cpu().numpy(), k=1)
    _, idx_ba = tree_a.query(b.detach()[:, :3].cpu().numpy(), k=1)
    idx_ab = torch.as_tensor(idx_ab, dtype=torch.int64)
    idx_ba = torch.as_tensor(idx_ba, dtype=torch.int64)
    d_ab = ((a - b[idx_ab]) ** 2).sum(-1).mean()
    d_ba = ((b - a[idx_ba]) ** 2).sum(-1).mean()
    return d_ab + d_ba


def loss_pc(prev_vectors: torch.Tensor, cur_vectors: torch.Tensor, pose_tangent: torch.Tensor) -> torch.Tensor:
    """Parameter-space Chamfer consistency between the previous scene snapshot
    and the current scene under the newest relative pose.

    Only the pose tangent receives gradients: the snapshot side is moved by
    the differentiable pose, the current side by a detached copy of the same
    pose, so the loss vanishes when the scene is unchanged and the tangent
    sits at its current value.
    """
    rot, trans = diffmath.se3_exp(pose_tangent)
    rot_d, trans_d = diffmath.se3_exp(pose_tangent.detach())
    left = transform_param_vectors(prev_vectors.detach(), rot, trans)
    right = transform_param_vectors(cur_vectors.detach(), rot_d, trans_d)
    return chamfer(left, right)


def age_weights(created_at: torch.Tensor, step: int, t_mature: int = 500) -> torch.Tensor:
    """Linear maturity ramp: 0 at creation, 1 after t_mature steps."""
    age = (step - created_at).to(torch.float64)
    return torch.clamp(age / float(t_mature), 0.0, 1.0)


def loss_ipc(
    scene: GaussianScene,
    anchors: AnchorState,
    step: int,
    t_mature: int = 500,
    vectors: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Age-weighted squared drift of anchored splats from their snapshots.

    Mean over anchors of w_age * ||v_now - v_snapshot||^2 in the 16-dim
    normalized parameter space; older splats are pulled harder.
    """
    if len(anchors) == 0:
        base = vectors if vectors is not None else scene.means
        return torch.zeros((), dtype=base.dtype)
    if int(anchors.indices.max()) >= len(scene):
        raise ValueError("anchor indices exceed scene size; anchors are stale")
    vec = vectors if vectors is not None else param_vector(scene)
    drift = ((vec[anchors.indices] - anchors.vectors.to(vec.dtype)) ** 2).sum(-1)
    w = age_weights(anchors.created_at, step, t_mature).to(vec.dtype)
    return (w * drift).mean()


# ---------------------------------------------------------------------------
# combined objective


def total_loss(
    render_color,
    target_image,
    weights: LossWeights,
    *,
    identity=None,
    mask=None,
    scene: Optional[GaussianScene] = None,
    anchors: Optional[AnchorState] = None,
    step: int = 0,
    t_mature: int = 500,
    prev_vectors: Optional[torch.Tensor] = None,
    pose_tangent: Optional[torch.Tensor] = None,
    jsd_seed: int = 0,
    scene_vectors: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, dict]:
    """Weighted sum of the active objective terms.

    The identity term needs ``identity`` + ``mask`` + ``scene``; the
    inter-frame term needs ``anchors``; the pose-consistency term needs
    ``prev_vectors`` + ``pose_tangent`` (+ ``scene_vectors`` for the current
    side). Inactive terms are skipped, not zero-weighted. Returns the total
    and a dict of unweighted components; any non-finite component raises.
    """
    components: dict = {}
    components["rgb"] = loss_rgb(render_color, target_image, weights.gamma)
    total = weights.lambda_rgb * components["rgb"]

    if mask is not None and identity is not None and scene is not None and weights.lambda_kea != 0.0:
        components["kea"] = loss_kea(identity, mask, scene, weights, seed=jsd_seed)
        total = total + weights.lambda_kea * components["kea"]

    if anchors is not None and weights.lambda_ipc != 0.0 and scene is not None:
        components["ipc"] = loss_ipc(scene, anchors, step, t_mature, vectors=scene_vectors)
        total = total + weights.lambda_ipc * components["ipc"]

    if prev_vectors is not None and pose_tangent is not None and weights.lambda_pc != 0.0:
        cur = scene_vectors if scene_vectors is not None else param_vector(scene)
        components["pc"] = loss_pc(prev_vectors, cur, pose_tangent)
        total = total + weights.lambda_pc * components["pc"]

    for name, value in components.items():
        if not torch.isfinite(value.detach()):
            raise ValueError(f"non-finite loss component: {name}")
    components["total"] = total
    return total, components
