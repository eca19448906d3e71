"""Reverse diffusion with pluggable per-step thresholding.

Policies:

* ``none``     -- identity
* ``static``   -- clamp to ``[-1, 1]``
* ``dynamic``  -- per-sample percentile ``s`` of ``|z|``; if ``s > 1`` clamp to
  ``[-s, s]`` and divide by ``s``, else clamp to ``[-1, 1]``
* ``temporal`` -- clamp to ``[-s, s]`` with ``s = omega * t + b``
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .conditional_ldm import predict_noise
from .schedules import NoiseSchedule

POLICY_KINDS = ("none", "static", "dynamic", "temporal")


@dataclass(frozen=True)
class ThresholdPolicy:
    kind: str = "temporal"
    omega: float = 0.003
    intercept: float = 1.4
    percentile: float = 99.5

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown threshold policy {self.kind!r}; expected one of {POLICY_KINDS}")
        if self.kind == "temporal" and (self.omega <= 0 or self.intercept < 1):
            raise ValueError("temporal thresholding needs omega > 0 and intercept >= 1")
        if self.kind == "dynamic" and not 50 < self.percentile <= 100:
            raise ValueError("dynamic percentile must lie in (50, 100]")

    def threshold(self, t: int) -> float:
        """Clamp bound at timestep ``t`` (``nan`` when data dependent or absent)."""
        if self.kind == "static":
            return 1.0
        if self.kind == "temporal":
            return self.omega * t + self.intercept
        return math.nan


def _bound_in_dtype(s: float, dtype) -> torch.Tensor:
    """``s`` in ``dtype``, rounded toward zero so clamped values never exceed the exact bound."""
    b = torch.tensor(s, dtype=dtype)
    if float(b) > s:
        b = torch.nextafter(b, torch.zeros_like(b))
    return b


def apply_threshold(z: torch.Tensor, t: int, policy: ThresholdPolicy) -> torch.Tensor:
    if policy.kind == "none":
        return z
    if policy.kind == "static":
        return z.clamp(-1.0, 1.0)
    if policy.kind == "temporal":
        s = _bound_in_dtype(policy.threshold(t), z.dtype)
        return torch.maximum(torch.minimum(z, s), -s)
    # dynamic: one percentile per sample over all of its elements
    flat = z.reshape(z.shape[0], -1) if z.dim() > 1 else z.reshape(1, -1)
    s = torch.quantile(flat.abs().to(torch.float64), policy.percentile / 100.0, dim=1).to(z.dtype)
    s = torch.clamp(s, min=1.0).reshape((-1,) + (1,) * (flat.dim() - 1))
    out = torch.maximum(torch.minimum(flat, s), -s) / s
    return out.reshape(z.shape)


def reverse_step(z_t, t: int, eps_hat, schedule: NoiseSchedule, policy: ThresholdPolicy, noise=None):
    """One ancestral step ``z_t -> z_{t-1}`` followed by thresholding.

    The threshold is evaluated at the destination step ``max(t - 1, 0)``.
    ``noise`` is ignored at ``t = 0``.
    """
    t = int(t)
    schedule.check_timestep(t)
    a = float(schedule.alpha[t])
    ab = float(schedule.alpha_bar[t])
    mean = (z_t - ((1.0 - a) / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a)
    if t > 0 and noise is not None:
        mean = mean + float(schedule.sigma[t]) * noise
    return apply_threshold(mean, max(t - 1, 0), policy)


@dataclass
class SamplerTrace:
    """Per-step statistics of the latent after each reverse step."""

    rows: list[dict] = field(default_factory=list)

    def record(self, t: int, z: torch.Tensor, s: float) -> None:
        self.rows.append({"t": t, "min": float(z.min()), "max": float(z.max()),
                          "mean": float(z.mean()), "std": float(z.std()), "threshold": s})

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["t", "min", "max", "mean", "std", "threshold"])
            w.writeheader()
            w.writerows(self.rows)


def _generators(seed, n):
    seeds = [int(seed) + i for i in range(n)] if np.ndim(seed) == 0 else [int(s) for s in seed]
    if len(seeds) != n:
        raise ValueError("need one seed per sample")
    return [torch.Generator().manual_seed(s) for s in seeds]


def _randn(gens, shape):
    return torch.stack([torch.randn(shape, generator=g) for g in gens])


@torch.no_grad()
def sample_latents(cond: torch.Tensor, estimator, schedule: NoiseSchedule, policy: ThresholdPolicy,
                   seed=0, trace: SamplerTrace | None = None) -> torch.Tensor:
    """Run all T reverse steps from ``z_T ~ N(0, I)`` for a batch of conditions.

    Sample ``i`` draws its noise from its own generator seeded ``seed + i``
    (or ``seed[i]`` for a sequence), so results do not depend on how the
    batch is composed.
    """
    gens = _generators(seed, cond.shape[0])
    shape = tuple(cond.shape[1:])
    z = _randn(gens, shape).to(cond.dtype)
    for t in range(schedule.T - 1, -1, -1):
        eps = predict_noise(z, torch.full((cond.shape[0],), t, dtype=torch.long), cond, estimator)
        noise = _randn(gens, shape).to(cond.dtype) if t > 0 else None
        z = reverse_step(z, t, eps, schedule, policy, noise)
        if trace is not None:
            trace.record(t, z, policy.threshold(max(t - 1, 0)))
    return z


@torch.no_grad()
def sample_soft_tissue(cxr, compressor, estimator, schedule: NoiseSchedule, policy: ThresholdPolicy,
                       seed=0, trace: SamplerTrace | None = None, batch_size: int = 64) -> np.ndarray:
    """Encode radiographs, sample soft-tissue latents, snap to codes and decode.

    ``cxr`` is ``(H, W)`` or ``(N, H, W)`` in ``[-1, 1]``; the output has the
    same shape and range.
    """
    if compressor is None or estimator is None:
        raise RuntimeError("compressor and estimator checkpoints must be loaded before sampling")
    x = torch.as_tensor(np.asarray(cxr), dtype=torch.float32)
    single = x.dim() == 2
    if single:
        x = x[None]
    seeds = [int(seed) + i for i in range(x.shape[0])] if np.ndim(seed) == 0 else list(seed)
    out = []
    for s in range(0, x.shape[0], batch_size):
        cond = compressor.to_latent(x[s:s + batch_size, None])
        z0 = sample_latents(cond, estimator, schedule, policy, seeds[s:s + batch_size], trace)
        out.append(compressor.from_latent(z0)[:, 0])
    result = torch.cat(out).numpy().astype(np.float64)
    return result[0] if single else result
