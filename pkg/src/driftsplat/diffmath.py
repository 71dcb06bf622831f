"""Differentiable (torch) counterparts of the rigid-motion and shading math.

Everything here preserves autograd graphs; the numpy versions in ``core`` are
the plain-data API. Batched where the rasterizer needs it.
"""

from __future__ import annotations

import torch

from .core import SMALL_ANGLE

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Batched (N, 4) wxyz quaternions to (N, 3, 3) rotations. Normalizes."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_canonical(q: torch.Tensor) -> torch.Tensor:
    """Unit quaternion with non-negative scalar part (sign gauge fix)."""
    q = q / q.norm(dim=-1, keepdim=True)
    sign = torch.where(q[..., :1] < 0, -torch.ones_like(q[..., :1]), torch.ones_like(q[..., :1]))
    return q * sign


def build_covariance(rotations: torch.Tensor, log_scales: torch.Tensor) -> torch.Tensor:
    """(N, 3, 3) covariances R diag(exp(2 s)) R^T from quats and log-scales."""
    r = quat_to_rotmat(rotations)
    s2 = torch.exp(2.0 * log_scales)
    return r @ (s2.unsqueeze(-1) * r.transpose(-1, -2))


def _hat(v: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros((), dtype=v.dtype)
    return torch.stack(
        [
            torch.stack([zero, -v[2], v[1]]),
            torch.stack([v[2], zero, -v[0]]),
            torch.stack([-v[1], v[0], zero]),
        ]
    )


def se3_exp(tangent: torch.Tensor):
    """Differentiable exponential map of one 6-tangent -> (R, t).

    The small-angle branch is chosen on the detached angle; both branches are
    smooth inside their region so autograd stays exact.
    """
    omega, upsilon = tangent[:3], tangent[3:]
    theta = omega.norm()
    k = _hat(omega)
    k2 = k @ k
    eye = torch.eye(3, dtype=tangent.dtype)
    if float(theta.detach()) < SMALL_ANGLE:
        rot = eye + k + 0.5 * k2
        v = eye + 0.5 * k + k2 / 6.0
    else:
        a = torch.sin(theta) / theta
        b = (1.0 - torch.cos(theta)) / theta**2
        c = (theta - torch.sin(theta)) / theta**3
        rot = eye + a * k + b * k2
        v = eye + b * k + c * k2
    return rot, v @ upsilon


def eval_sh(degree: int, sh: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Real-SH radiance in RGB for unit view directions.

    sh: (N, K, 3) with K >= (degree + 1)^2; dirs: (N, 3). The 0.5 offset is
    part of the color decoding convention (DC coefficient stores
    (c - 0.5) / SH_C0).
    """
    result = SH_C0 * sh[:, 0]
    if degree >= 1:
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        result = result - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3]
        if degree >= 2:
            xx, yy, zz = x * x, y * y, z * z
            xy, yz, xz = x * y, y * z, x * z
            result = (
                result
                + SH_C2[0] * xy * sh[:, 4]
                + SH_C2[1] * yz * sh[:, 5]
                + SH_C2[2] * (2.0 * zz - xx - yy) * sh[:, 6]
                + SH_C2[3] * xz * sh[:, 7]
                + SH_C2[4] * (xx - yy) * sh[:, 8]
            )
            if degree >= 3:
                result = (
                    result
                    + SH_C3[0] * y * (3.0 * xx - yy) * sh[:, 9]
                    + SH_C3[1] * xy * z * sh[:, 10]
                    + SH_C3[2] * y * (4.0 * zz - xx - yy) * sh[:, 11]
                    + SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy) * sh[:, 12]
                    + SH_C3[4] * x * (4.0 * zz - xx - yy) * sh[:, 13]
                    + SH_C3[5] * z * (xx - yy) * sh[:, 14]
                    + SH_C3[6] * x * (xx - 3.0 * yy) * sh[:, 15]
                )
    return result + 0.5
