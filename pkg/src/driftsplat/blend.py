"""Multi-view-consistent editing algebra.

Frames are edited one at a time in capture order. Each denoising step builds
a guided estimate from unconditional, image-conditional, and fully
conditioned denoiser calls, then averages image-conditional estimates taken
against a window of previously edited frames with exponentially decaying
weights, newest frame weighted highest. The two parts are combined into a
single score and the latent takes a linear step against it. The denoiser is
an injected callable so the algebra stays testable without any network.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .core import Frame


@dataclass
class NoiseField:
    """A dense noise estimate with shape-checked arithmetic."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("noise field contains non-finite entries")

    @property
    def shape(self):
        return self.data.shape

    def _check(self, other: "NoiseField"):
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch: {self.shape} vs {other.shape}")

    def __add__(self, other: "NoiseField") -> "NoiseField":
        self._check(other)
        return NoiseField(self.data + other.data)

    def __sub__(self, other: "NoiseField") -> "NoiseField":
        self._check(other)
        return NoiseField(self.data - other.data)

    def __mul__(self, scalar: float) -> "NoiseField":
        return NoiseField(self.data * float(scalar))

    __rmul__ = __mul__

    @staticmethod
    def zeros(shape) -> "NoiseField":
        return NoiseField(np.zeros(shape))


@dataclass
class BlendConfig:
    """Hyperparameters of the consistency blender.

    w is the window length over previously edited frames, lambda_d the decay
    of their weights, gamma_f / gamma_e the score mix between the current
    frame's guided estimate and the window average, s_f / s_t the image and
    text guidance scales, steps the denoising step count.
    """

    w: int = 3
    lambda_d: float = 0.5
    gamma_f: float = 0.7
    gamma_e: float = 0.3
    s_f: float = 1.5
    s_t: float = 7.5
    steps: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.w < 1:
            raise ValueError("window w must be >= 1")
        if not (0.0 < self.lambda_d <= 1.0):
            raise ValueError("lambda_d must lie in (0, 1]")
        if self.gamma_f < 0 or self.gamma_e < 0:
            raise ValueError("gamma_f and gamma_e must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


# Denoiser contract: (latent, conditioning image or None, text flag, step)
# -> NoiseField of the latent's shape, deterministic for fixed inputs.
DenoiserInterface = Callable[[NoiseField, Optional[np.ndarray], bool, int], NoiseField]


class SyntheticDenoiser:
    """Linear test denoiser: a * latent + b * mean(cond) + c * text flag.

    Every call is an affine function of its inputs, so an entire editing run
    has a closed-form evaluation that tests can compute symbolically.
    """

    def __init__(self, a: float = 0.25, b: float = 0.5, c: float = 0.125):
        self.a = a
        self.b = b
        self.c = c

    def __call__(self, latent: NoiseField, cond: Optional[np.ndarray],
                 text: bool, step: int) -> NoiseField:
        out = self.a * latent.data
        if cond is not None:
            out = out + self.b * float(np.mean(cond))
        if text:
            out = out + self.c
        return NoiseField(out)


def decay_weights(w: int, lambda_d: float) -> List[float]:
    """Normalized exponential decay weights, last entry largest.

    Entry n (1-based) is lambda_d ** (w - n) before normalization, so the
    ratio of consecutive weights is 1 / lambda_d and the newest window slot
    carries the most influence.
    """
    if w < 1:
        raise ValueError("w must be >= 1")
    if not (0.0 < lambda_d <= 1.0):
        raise ValueError("lambda_d must lie in (0, 1]")
    raw = [1.0]
    for _ in range(w - 1):
        raw.append(raw[-1] * lambda_d)
    raw.reverse()
    total = sum(raw)
    return [r / total for r in raw]


def blended_noise(estimates: Sequence[NoiseField], weights: Sequence[float]) -> NoiseField:
    """Weighted average of noise estimates. Weights must sum to 1."""
    if len(estimates) == 0:
        raise ValueError("empty estimate list")
    if len(estimates) != len(weights):
        raise ValueError("estimates and weights differ in length")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError("weights must sum to 1")
    shape = estimates[0].shape
    for e in estimates[1:]:
        if e.shape != shape:
            raise ValueError(f"shape mismatch: {e.shape} vs {shape}")
    acc = np.zeros(shape)
    for w_n, e in zip(weights, estimates):
        acc += w_n * e.data
    return NoiseField(acc)


def cfg_compose(eps_uncond: NoiseField, eps_img: NoiseField, eps_full: NoiseField,
                s_f: float, s_t: float) -> NoiseField:
    """Classifier-free guidance over image and text conditioning.

    eps_uncond + s_f * (eps_img - eps_uncond) + s_t * (eps_full - eps_img).
    Both scales at 1 telescope to eps_full; both at 0 give eps_uncond. The
    evaluation groups by field, (1 - s_f) u + (s_f - s_t) i + s_t f, so those
    two collapses are exact rather than within rounding.
    """
    eps_uncond._check(eps_img)
    eps_uncond._check(eps_full)
    return NoiseField(
        (1.0 - s_f) * eps_uncond.data
        + (s_f - s_t) * eps_img.data
        + s_t * eps_full.data
    )


def score_estimate(eps_tilde: NoiseField, eps_bar: NoiseField,
                   gamma_f: float, gamma_e: float) -> NoiseField:
    """Final per-step score: gamma_f * guided + gamma_e * window average."""
    eps_tilde._check(eps_bar)
    return NoiseField(gamma_f * eps_tilde.data + gamma_e * eps_bar.data)


def autoregressive_edit(frames: Sequence[Frame], masks, denoiser: DenoiserInterface,
                        cfg: BlendConfig,
                        trace: Optional[Callable[[dict], None]] = None) -> List[np.ndarray]:
    """Edit frames in capture order, each conditioned on the window of
    previously edited frames.

    masks is a sequence of (H, W) binary arrays or None entries; the edited
    content replaces the original only inside the mask (hard composite), and
    a None or all-zero mask passes the frame through unchanged. The first
    frame has an empty window, so its score is gamma_f times the guided
    estimate alone. Returns the edited images; ``trace`` receives one dict
    per (frame, step) with the mean of each intermediate field.
    """
    if len(frames) == 0:
        raise ValueError("no frames")
    edited: List[np.ndarray] = []
    for n, frame in enumerate(frames):
        image = np.asarray(frame.image, dtype=np.float64)
        mask = None if masks is None else masks[n]
        latent = NoiseField(image.copy())
        window = edited[max(0, n - cfg.w):n]
        for t in range(cfg.steps, 0, -1):
            eps_u = denoiser(latent, None, False, t)
            eps_i = denoiser(latent, image, False, t)
            eps_fl = denoiser(latent, image, True, t)
            eps_tilde = cfg_compose(eps_u, eps_i, eps_fl, cfg.s_f, cfg.s_t)
            if window:
                betas = decay_weights(len(window), cfg.lambda_d)
                neighbor = [denoiser(latent, e, False, t) for e in window]
                eps_bar = blended_noise(neighbor, betas)
            else:
                eps_bar = NoiseField.zeros(latent.shape)
            score = score_estimate(eps_tilde, eps_bar, cfg.gamma_f, cfg.gamma_e)
            latent = NoiseField(latent.data - score.data / cfg.steps)
            if trace is not None:
                trace({
                    "frame": n, "step": t,
                    "eps_tilde_mean": float(np.mean(eps_tilde.data)),
                    "eps_bar_mean": float(np.mean(eps_bar.data)),
                    "score_mean": float(np.mean(score.data)),
                    "latent_mean": float(np.mean(latent.data)),
                })
        if mask is None:
            out = image.copy()
        else:
            m = np.asarray(mask, dtype=np.float64)
            if m.shape != image.shape[:2]:
                raise ValueError("mask shape does not match frame")
            out = np.where(m[..., None] > 0.5, latent.data, image)
        edited.append(out)
    return edited


def _pam_assign(dists, medoids):
    sub = dists[:, medoids]
    return sub.min(axis=1).sum()


def sample_query_points(mask: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    """K-medoids (PAM) over foreground pixel coordinates.

    Returns (k, 2) integer (row, col) coordinates, each one a foreground
    pixel. Initialization is a seeded distinct draw; the swap phase runs
    best-improvement passes until convergence, capped at 100. Masks with
    more than 2048 foreground pixels are subsampled (seeded) before
    clustering to bound the distance matrix.
    """
    m = np.asarray(mask)
    coords = np.argwhere(m > 0.5)
    if len(coords) < k:
        raise ValueError(f"mask has {len(coords)} foreground pixels, need >= {k}")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    if len(coords) > 2048:
        pick = rng.choice(len(coords), size=2048, replace=False)
        pick.sort()
        coords = coords[pick]
    pts = coords.astype(np.float64)
    dists = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    medoids = list(rng.choice(len(coords), size=k, replace=False))
    cost = _pam_assign(dists, medoids)
    for _ in range(100):
        best_swap = None
        best_cost = cost
        non_medoids = [i for i in range(len(coords)) if i not in set(medoids)]
        for mi in range(k):
            for h in non_medoids:
                trial = list(medoids)
                trial[mi] = h
                c = _pam_assign(dists, trial)
                if c < best_cost - 1e-12:
                    best_cost = c
                    best_swap = (mi, h)
        if best_swap is None:
            break
        medoids[best_swap[0]] = best_swap[1]
        cost = best_cost
    return coords[sorted(medoids)]
