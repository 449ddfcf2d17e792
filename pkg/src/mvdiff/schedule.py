"""Diffusion forward process with noise shared across views and frames.

The composite noise for a V-view, N-frame clip is built from three
independent standard-normal fields: a residual term per (view, frame), a
motion term shared by all frames of a view, and a panoramic term shared
by all views of a frame. Summing the three would triple the variance, so
by default the sum is scaled back to unit variance; the resulting field
has correlation 1/3 between slices that share a view or a frame and 0
when both differ. The unnormalized literal sum stays available behind
``normalize=False`` for fidelity experiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import RngStream
from .tensor import DimensionError

__all__ = ["NoiseSchedule", "SharedNoise", "make_linear_schedule", "sample_shared_noise", "q_sample"]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray      # float64 [T]
    alphas: np.ndarray     # 1 - betas
    alpha_hat: np.ndarray  # cumulative product of alphas

    @property
    def T(self) -> int:
        return len(self.betas)


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})")
    if T < 2:
        raise ValueError(f"need T >= 2, got {T}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_hat=np.cumprod(alphas))


@dataclass
class SharedNoise:
    """Residual / motion / panoramic noise triple and their composite."""

    r: np.ndarray          # [V,N,C,H,W]
    m: np.ndarray          # [V,1,C,H,W] shared along frames
    p: np.ndarray          # [1,N,C,H,W] shared along views
    composite: np.ndarray  # [V,N,C,H,W]

    @property
    def shape(self):
        return self.r.shape


def sample_shared_noise(
    V: int,
    N: int,
    C: int,
    H: int,
    W: int,
    rng: RngStream,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
    normalize: bool = True,
    enabled: bool = True,
    dtype=np.float32,
) -> SharedNoise:
    """Draw the correlated noise field for a V x N clip.

    With ``enabled=False`` the motion and panoramic terms are zeroed and the
    composite reduces exactly to the residual field (the no-sharing switch).
    """
    if V < 1 or N < 1:
        raise ValueError(f"need V,N >= 1, got V={V}, N={N}")
    r = rng.fork("r").normal((V, N, C, H, W), dtype=dtype)
    m = rng.fork("m").normal((V, 1, C, H, W), dtype=dtype)
    p = rng.fork("p").normal((1, N, C, H, W), dtype=dtype)
    if not enabled:
        return SharedNoise(r=r, m=np.zeros_like(m), p=np.zeros_like(p), composite=r)
    wr, wm, wp = (float(w) for w in weights)
    comp = wr * r + wm * m + wp * p
    if normalize:
        comp = comp / np.sqrt(wr * wr + wm * wm + wp * wp, dtype=np.float64).astype(dtype)
    return SharedNoise(r=r, m=m, p=p, composite=comp.astype(dtype, copy=False))


def q_sample(x: np.ndarray, t: int, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward-process sample sqrt(ahat_t) x + sqrt(1 - ahat_t) noise."""
    if x.shape != noise.shape:
        raise DimensionError(f"latent {x.shape} vs noise {noise.shape}")
    if not 0 <= t < sched.T:
        raise ValueError(f"t={t} outside [0, {sched.T})")
    a = sched.alpha_hat[t]
    return (np.sqrt(a) * x + np.sqrt(1.0 - a) * noise).astype(x.dtype, copy=False)
