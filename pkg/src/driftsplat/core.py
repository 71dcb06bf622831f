"""Scene, camera, and rigid-motion primitives shared by every other module.

Conventions used across the package:

* quaternions are (w, x, y, z); storage is unnormalized, consumers normalize,
* per-axis Gaussian scales are stored as natural logs,
* stored camera poses are camera-to-world; the rasterizer consumes
  world-to-camera (see ``rasterizer.render``),
* SE(3) tangents are 6-vectors, rotation part first: (omega, upsilon).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

# below this rotation angle the exponential/log maps switch to Taylor series
SMALL_ANGLE = 1e-8

# Y_0^0 normalization constant of the real spherical harmonic basis
SH_C0 = 0.28209479177387814


# ---------------------------------------------------------------------------
# quaternions


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-30:
        raise ValueError("cannot normalize zero quaternion")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, both (w, x, y, z)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dtype=np.float64,
    )


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def rotmat_to_quat(rotation: np.ndarray) -> np.ndarray:
    """Stable rotation-matrix to quaternion conversion (Shepperd's method)."""
    m = np.asarray(rotation, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    # canonical sign: non-negative scalar part
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------------------
# SO(3) / SE(3)


def _hat(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]], dtype=np.float64
    )


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(omega)
    k = _hat(omega)
    if theta < SMALL_ANGLE:
        # second-order Taylor; exact to machine precision at this magnitude
        return np.eye(3) + k + 0.5 * (k @ k)
    return np.eye(3) + (np.sin(theta) / theta) * k + ((1.0 - np.cos(theta)) / theta**2) * (k @ k)


def so3_log(rotation: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix, via the quaternion route.

    Stable for angles approaching pi, where the direct skew-part formula
    degenerates.
    """
    q = rotmat_to_quat(rotation)
    w = q[0]
    xyz = q[1:]
    s = np.linalg.norm(xyz)
    if s < SMALL_ANGLE:
        return 2.0 * xyz  # theta ~ 0; omega = 2*xyz/(1 - |xyz|^2/6 ...) ~ 2*xyz
    theta = 2.0 * np.arctan2(s, w)
    return theta * xyz / s


def _so3_v_matrix(omega: np.ndarray) -> np.ndarray:
    """Left Jacobian V(omega) with t = V @ upsilon in the exponential map."""
    theta = np.linalg.norm(omega)
    k = _hat(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * k + b * (k @ k)


def _so3_v_inv(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    k = _hat(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + (k @ k) / 12.0
    half = 0.5 * theta
    # cot expression is well conditioned away from theta = 0
    coef = (1.0 - half * np.cos(half) / np.sin(half)) / theta**2
    return np.eye(3) - 0.5 * k + coef * (k @ k)


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform. ``apply`` maps points x to R @ x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise ValueError("non-finite pose")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation is not orthonormal")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def exp(cls, tangent: np.ndarray) -> "PoseSE3":
        tangent = np.asarray(tangent, dtype=np.float64).reshape(6)
        omega, upsilon = tangent[:3], tangent[3:]
        return cls(so3_exp(omega), _so3_v_matrix(omega) @ upsilon)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "PoseSE3":
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {m.shape}")
        if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 1e-9:
            raise ValueError("bottom row of a rigid transform must be (0, 0, 0, 1)")
        return cls(m[:3, :3], m[:3, 3])

    @property
    def tangent(self) -> np.ndarray:
        omega = so3_log(self.rotation)
        upsilon = _so3_v_inv(omega) @ self.translation
        return np.concatenate([omega, upsilon])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self after other: (self . other)(x) = self(other(x))."""
        return PoseSE3(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def rotation_angle_deg(self) -> float:
        return float(np.degrees(np.linalg.norm(so3_log(self.rotation))))


def se3_exp(tangent: np.ndarray) -> PoseSE3:
    return PoseSE3.exp(tangent)


def se3_log(pose: PoseSE3) -> np.ndarray:
    return pose.tangent


def se3_compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    return a.compose(b)


def se3_apply(pose: PoseSE3, points: np.ndarray) -> np.ndarray:
    return pose.apply(points)


# ---------------------------------------------------------------------------
# Gaussian primitives


def covariance_from(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """3x3 covariance R diag(exp(2 s)) R^T from a quaternion and log-scales."""
    r = quat_to_rotmat(rotation)
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64).reshape(3))
    return r @ np.diag(s2) @ r.T


def kea_identity_from_logits(m) -> np.ndarray:
    """Hard identity labels from 2-vector logits; ties resolve to 0."""
    arr = np.asarray(m if not torch.is_tensor(m) else m.detach().cpu().numpy())
    return (arr[..., 1] > arr[..., 0]).astype(np.int64)


@dataclass
class Gaussian:
    """One splat, plain numpy. Convenience record; batch storage is GaussianScene."""

    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    sh: np.ndarray  # ((degree + 1)^2, 3)
    m: np.ndarray  # identity logits, (2,)
    created_at: int = 0

    @property
    def covariance(self) -> np.ndarray:
        return covariance_from(self.rotation, self.log_scale)


_FIELDS = ("means", "log_scales", "rotations", "opacity_logits", "sh", "m")


@dataclass
class GaussianScene:
    """Structure-of-arrays splat container backed by torch tensors.

    ``grad_accum``/``denom`` realize a running mean of view-space positional
    gradient magnitudes: ``grad_accum`` holds the accumulated sum, ``denom``
    the number of accumulation events; densification divides them.
    """

    means: torch.Tensor  # (N, 3)
    log_scales: torch.Tensor  # (N, 3)
    rotations: torch.Tensor  # (N, 4) wxyz, unnormalized
    opacity_logits: torch.Tensor  # (N,)
    sh: torch.Tensor  # (N, (degree + 1)^2, 3)
    m: torch.Tensor  # (N, 2) identity logits
    created_at: torch.Tensor  # (N,) int64 creation step
    grad_accum: torch.Tensor = None  # (N,) float
    denom: torch.Tensor = None  # (N,) int64

    def __post_init__(self):
        n = self.means.shape[0]
        if self.grad_accum is None:
            self.grad_accum = torch.zeros(n, dtype=self.means.dtype)
        if self.denom is None:
            self.denom = torch.zeros(n, dtype=torch.int64)
        shapes = {
            "means": (n, 3),
            "log_scales": (n, 3),
            "rotations": (n, 4),
            "opacity_logits": (n,),
            "m": (n, 2),
            "created_at": (n,),
            "grad_accum": (n,),
            "denom": (n,),
        }
        for name, want in shapes.items():
            got = tuple(getattr(self, name).shape)
            if got != want:
                raise ValueError(f"{name}: expected shape {want}, got {got}")
        if self.sh.ndim != 3 or self.sh.shape[0] != n or self.sh.shape[2] != 3:
            raise ValueError(f"sh: expected (N, K, 3), got {tuple(self.sh.shape)}")
        k = self.sh.shape[1]
        deg = int(round(k**0.5)) - 1
        if (deg + 1) ** 2 != k:
            raise ValueError(f"sh band count {k} is not a square")

    @classmethod
    def from_arrays(
        cls,
        means,
        log_scales,
        rotations,
        opacity_logits,
        sh,
        m=None,
        created_at=None,
        dtype: torch.dtype = torch.float64,
    ) -> "GaussianScene":
        def t(x):
            return torch.as_tensor(np.asarray(x), dtype=dtype).clone()

        means = t(means)
        n = means.shape[0]
        if m is None:
            m = torch.zeros(n, 2, dtype=dtype)
        if created_at is None:
            created_at = torch.zeros(n, dtype=torch.int64)
        return cls(
            means=means,
            log_scales=t(log_scales),
            rotations=t(rotations),
            opacity_logits=t(opacity_logits).reshape(n),
            sh=t(sh),
            m=t(m),
            created_at=torch.as_tensor(np.asarray(created_at), dtype=torch.int64).reshape(n).clone(),
        )

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian], dtype: torch.dtype = torch.float64) -> "GaussianScene":
        if not gaussians:
            raise ValueError("empty gaussian list")
        return cls.from_arrays(
            means=np.stack([g.mean for g in gaussians]),
            log_scales=np.stack([g.log_scale for g in gaussians]),
            rotations=np.stack([g.rotation for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]),
            sh=np.stack([g.sh for g in gaussians]),
            m=np.stack([g.m for g in gaussians]),
            created_at=np.array([g.created_at for g in gaussians], dtype=np.int64),
            dtype=dtype,
        )

    def __len__(self) -> int:
        return int(self.means.shape[0])

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            mean=self.means[i].detach().cpu().numpy().copy(),
            log_scale=self.log_scales[i].detach().cpu().numpy().copy(),
            rotation=self.rotations[i].detach().cpu().numpy().copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh=self.sh[i].detach().cpu().numpy().copy(),
            m=self.m[i].detach().cpu().numpy().copy(),
            created_at=int(self.created_at[i]),
        )

    @property
    def sh_degree(self) -> int:
        return int(round(self.sh.shape[1] ** 0.5)) - 1

    @property
    def dtype(self) -> torch.dtype:
        return self.means.dtype

    def clone(self) -> "GaussianScene":
        return GaussianScene(
            means=self.means.detach().clone(),
            log_scales=self.log_scales.detach().clone(),
            rotations=self.rotations.detach().clone(),
            opacity_logits=self.opacity_logits.detach().clone(),
            sh=self.sh.detach().clone(),
            m=self.m.detach().clone(),
            created_at=self.created_at.clone(),
            grad_accum=self.grad_accum.detach().clone(),
            denom=self.denom.clone(),
        )

    def subset(self, keep) -> "GaussianScene":
        keep = torch.as_tensor(keep)
        return GaussianScene(
            means=self.means[keep].detach().clone(),
            log_scales=self.log_scales[keep].detach().clone(),
            rotations=self.rotations[keep].detach().clone(),
            opacity_logits=self.opacity_logits[keep].detach().clone(),
            sh=self.sh[keep].detach().clone(),
            m=self.m[keep].detach().clone(),
            created_at=self.created_at[keep].clone(),
            grad_accum=self.grad_accum[keep].detach().clone(),
            denom=self.denom[keep].clone(),
        )

    def cat(self, other: "GaussianScene") -> "GaussianScene":
        if other.sh.shape[1] != self.sh.shape[1]:
            raise ValueError("sh band mismatch")
        return GaussianScene(
            means=torch.cat([self.means, other.means]),
            log_scales=torch.cat([self.log_scales, other.log_scales]),
            rotations=torch.cat([self.rotations, other.rotations]),
            opacity_logits=torch.cat([self.opacity_logits, other.opacity_logits]),
            sh=torch.cat([self.sh, other.sh]),
            m=torch.cat([self.m, other.m]),
            created_at=torch.cat([self.created_at, other.created_at]),
            grad_accum=torch.cat([self.grad_accum, other.grad_accum]),
            denom=torch.cat([self.denom, other.denom]),
        )

    def kea_identity(self) -> torch.Tensor:
        """Per-splat hard identity label; ties resolve to 0."""
        return (self.m[:, 1] > self.m[:, 0]).to(torch.int64)

    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def validate(self) -> None:
        """Raise on the first non-finite or degenerate splat, naming its index."""
        if len(self) == 0:
            return
        for name in _FIELDS:
            t = getattr(self, name)
            bad = ~torch.isfinite(t.detach()).reshape(len(self), -1).all(dim=1)
            if bad.any():
                idx = int(bad.nonzero()[0, 0])
                raise ValueError(f"non-finite {name} at gaussian {idx}")
        norms = self.rotations.detach().norm(dim=1)
        if (norms < 1e-30).any():
            idx = int((norms < 1e-30).nonzero()[0, 0])
            raise ValueError(f"zero-norm rotation at gaussian {idx}")


@dataclass
class AnchorState:
    """Snapshot of identity-1 splats used by the inter-frame consistency loss.

    One entry per anchored splat: its index into the scene at snapshot time,
    its 16-dim normalized parameter vector (see ``losses.param_vector``), and
    its creation step for age weighting.
    """

    indices: torch.Tensor  # (A,) int64
    vectors: torch.Tensor  # (A, 16) detached
    created_at: torch.Tensor  # (A,) int64

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    @classmethod
    def empty(cls, dtype: torch.dtype = torch.float64) -> "AnchorState":
        return cls(
            indices=torch.zeros(0, dtype=torch.int64),
            vectors=torch.zeros(0, 16, dtype=dtype),
            created_at=torch.zeros(0, dtype=torch.int64),
        )


# ---------------------------------------------------------------------------
# cameras and frames


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def as_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }


@dataclass
class Frame:
    """One observed view: RGB in [0, 1], optional depth and editing mask."""

    image: np.ndarray  # (H, W, 3) float
    depth: Optional[np.ndarray] = None  # (H, W) float, positive where valid
    mask: Optional[np.ndarray] = None  # (H, W) {0, 1}
    index: int = 0

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {img.shape}")
        self.image = img
        if self.depth is not None:
            d = np.asarray(self.depth, dtype=np.float64)
            if d.shape != img.shape[:2]:
                raise ValueError("depth shape does not match image")
            self.depth = d
        if self.mask is not None:
            mk = np.asarray(self.mask)
            if mk.shape != img.shape[:2]:
                raise ValueError("mask shape does not match image")
            self.mask = (mk > 0).astype(np.float64)
