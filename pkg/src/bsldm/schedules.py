"""Diffusion timestep schedule, forward noising and offset noise.

Timesteps are zero-indexed ``0 .. T-1``. Schedule arrays are kept as float64
numpy arrays and converted to torch on demand.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep diffusion coefficients.

    ``sigma`` is the posterior standard deviation used by the reverse step,
    ``sigma_t**2 = (1 - alpha_bar[t-1]) / (1 - alpha_bar[t]) * beta[t]`` and
    ``sigma_0 = 0``.
    """

    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    sigma: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size == 0:
            raise ValueError("beta must be a non-empty 1-D array")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("all beta values must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        var = np.zeros_like(beta)
        var[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "sigma", np.sqrt(var))

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def check_timestep(self, t) -> None:
        t_arr = np.asarray(t.cpu() if torch.is_tensor(t) else t)
        if np.any(t_arr < 0) or np.any(t_arr >= self.T):
            raise IndexError(f"timestep out of range [0, {self.T}): {t_arr}")

    def fingerprint(self) -> str:
        """Short stable hash of the beta array, stored in checkpoints."""
        return hashlib.sha256(self.beta.tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class OffsetNoiseConfig:
    lam: float = 0.1

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"offset noise weight must be >= 0, got {self.lam}")


def _cosine_alpha_bar(T: int, s: float = 0.008) -> np.ndarray:
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T) + s) / (1 + s) * math.pi / 2) ** 2
    return f / f[0]


def make_cosine_schedule(T: int = 1000, beta_min: float = 0.008, beta_max: float = 0.02) -> NoiseSchedule:
    """Cosine-shaped beta profile clipped into ``[beta_min, beta_max]``.

    The cosine alpha-bar curve gives ``beta_t = 1 - abar_t / abar_{t-1}``;
    each beta is clipped into the requested band and alpha-bar is recomputed
    from the clipped values.
    """
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0 < beta_min < beta_max < 1):
        raise ValueError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    abar = _cosine_alpha_bar(int(T))
    beta = 1.0 - abar[1:] / np.maximum(abar[:-1], 1e-300)
    beta = np.clip(beta, beta_min, beta_max)
    return NoiseSchedule(beta)


def _generator(seed) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def sample_offset_noise(shape, lam: float, seed=0, dtype=torch.float32) -> torch.Tensor:
    """Draw ``eps_g + sqrt(lam) * eta`` with ``eta`` shared over spatial positions.

    ``shape`` is ``(N, C, H, W)`` (or ``(C, H, W)`` for a single sample). One
    bias scalar is drawn per sample and channel and broadcast over H and W,
    so each channel is distributed as N(0, I + lam * ones).

    ``seed`` may be an int or a ``torch.Generator``; passing a generator lets
    callers draw several tensors from one stream.
    """
    if lam < 0:
        raise ValueError(f"offset noise weight must be >= 0, got {lam}")
    shape = tuple(int(s) for s in shape)
    if len(shape) < 3:
        raise ValueError(f"expected (..., C, H, W) shape, got {shape}")
    g = _generator(seed)
    eps = torch.randn(shape, generator=g, dtype=dtype)
    if lam > 0:
        bias = torch.randn(shape[:-2] + (1, 1), generator=g, dtype=dtype)
        eps = eps + math.sqrt(lam) * bias
    return eps


def _gather(arr: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    vals = torch.as_tensor(arr, dtype=like.dtype, device=like.device)[torch.as_tensor(t, device=like.device).long()]
    # broadcast per-sample coefficients over the (C, H, W) dims
    return vals.reshape(vals.shape + (1,) * (like.dim() - vals.dim()))


def forward_noise(z0: torch.Tensor, t, schedule: NoiseSchedule, noise: torch.Tensor) -> torch.Tensor:
    """``sqrt(abar_t) * z0 + sqrt(1 - abar_t) * noise``.

    ``t`` is a scalar timestep or a length-N tensor for a batch.
    """
    if z0.shape != noise.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(z0.shape)}")
    schedule.check_timestep(t)
    if not torch.is_tensor(t) or t.dim() == 0:
        ab = float(schedule.alpha_bar[int(t)])
        return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * noise
    ab = _gather(schedule.alpha_bar, t, z0)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * noise
