"""Conditional noise estimator, diffusion objective and EMA-tracked training.

The radiograph latent conditions the estimator by channel concatenation:
the U-Net sees ``cat([z_t, cond])`` with ``2C`` input channels and predicts
``C`` noise channels.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .schedules import NoiseSchedule, OffsetNoiseConfig, forward_noise, sample_offset_noise

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "bsldm-ldm"
CHECKPOINT_VERSION = 1


@dataclass
class EstimatorConfig:
    latent_channels: int = 3
    base_channels: int = 128
    channel_mult: tuple = (1, 2, 2)
    attention_resolutions: tuple = (32, 16)
    num_res_blocks: int = 2
    time_embed_dim: int = 256
    latent_size: int = 128
    lr: float = 2e-4
    lr_decay_epochs: int = 1000
    lr_decay_gamma: float = 0.5
    ema_decay: float = 0.995
    batch_size: int = 4

    def __post_init__(self):
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        self.attention_resolutions = tuple(int(r) for r in self.attention_resolutions)
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")

    @property
    def in_channels(self) -> int:
        return 2 * self.latent_channels


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10_000) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(ch: int) -> int:
    for g in (32, 16, 8, 4, 2):
        if ch % g == 0 and ch // g >= 2:
            return g
    return 1


class TimeResBlock(nn.Module):
    def __init__(self, c_in, c_out, t_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.t_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, ch, heads: int = 1):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        n, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(n, 3, self.heads, c // self.heads, h * w).unbind(1)
        att = torch.softmax(torch.einsum("bhci,bhcj->bhij", q, k) / math.sqrt(c // self.heads), dim=-1)
        out = torch.einsum("bhij,bhcj->bhci", att, v).reshape(n, c, h, w)
        return x + self.proj(out)


class UNet(nn.Module):
    """U-Net noise estimator with self-attention at selected resolutions."""

    def __init__(self, cfg: EstimatorConfig):
        super().__init__()
        self.cfg = cfg
        t_dim = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(t_dim, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        chans = [cfg.base_channels * m for m in cfg.channel_mult]
        self.conv_in = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)

        self.down = nn.ModuleList()
        skips = [chans[0]]
        c, res = chans[0], cfg.latent_size
        for lvl, c_out in enumerate(chans):
            for _ in range(cfg.num_res_blocks):
                blk = nn.ModuleList([TimeResBlock(c, c_out, t_dim)])
                if res in cfg.attention_resolutions:
                    blk.append(SelfAttention(c_out))
                self.down.append(blk)
                c = c_out
                skips.append(c)
            if lvl < len(chans) - 1:
                self.down.append(nn.ModuleList([nn.Conv2d(c, c, 3, stride=2, padding=1)]))
                skips.append(c)
                res //= 2

        self.mid = nn.ModuleList([TimeResBlock(c, c, t_dim), SelfAttention(c), TimeResBlock(c, c, t_dim)])

        self.up = nn.ModuleList()
        for lvl, c_out in reversed(list(enumerate(chans))):
            for i in range(cfg.num_res_blocks + 1):
                blk = nn.ModuleList([TimeResBlock(c + skips.pop(), c_out, t_dim)])
                c = c_out
                if res in cfg.attention_resolutions:
                    blk.append(SelfAttention(c))
                if lvl > 0 and i == cfg.num_res_blocks:
                    blk.append(nn.Upsample(scale_factor=2, mode="nearest"))
                    blk.append(nn.Conv2d(c, c, 3, padding=1))
                    res *= 2
                self.up.append(blk)
        self.norm_out = nn.GroupNorm(_groups(c), c)
        self.conv_out = nn.Conv2d(c, cfg.latent_channels, 3, padding=1)

    @staticmethod
    def _run(blk, h, temb):
        for layer in blk:
            h = layer(h, temb) if isinstance(layer, TimeResBlock) else layer(h)
        return h

    def forward(self, x, t):
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        if not torch.is_tensor(t):
            t = torch.tensor([t])
        t = t.reshape(-1).expand(x.shape[0]) if t.numel() == 1 else t
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_embed_dim).to(x.dtype))
        h = self.conv_in(x)
        hs = [h]
        for blk in self.down:
            h = self._run(blk, h, temb)
            hs.append(h)
        h = self._run(self.mid, h, temb)
        for blk in self.up:
            h = self._run(blk, torch.cat([h, hs.pop()], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


def predict_noise(z_t: torch.Tensor, t, cond: torch.Tensor, model: nn.Module) -> torch.Tensor:
    """Noise estimate for ``z_t`` given the conditioning latent."""
    if z_t.shape != cond.shape:
        raise ValueError(f"z_t shape {tuple(z_t.shape)} != cond shape {tuple(cond.shape)}")
    return model(torch.cat([z_t, cond], dim=1), t)


def diffusion_loss(z0, cond, schedule: NoiseSchedule, offset_cfg: OffsetNoiseConfig, model, seed=0,
                   return_parts: bool = False):
    """MSE between the estimator output and the sampled (offset) noise.

    A timestep is drawn uniformly per sample. ``seed`` is an int or a
    ``torch.Generator`` shared with the caller's stream.
    """
    if z0.shape != cond.shape:
        raise ValueError(f"z0 shape {tuple(z0.shape)} != cond shape {tuple(cond.shape)}")
    g = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    t = torch.randint(0, schedule.T, (z0.shape[0],), generator=g)
    eps = sample_offset_noise(z0.shape, offset_cfg.lam, g, dtype=z0.dtype)
    z_t = forward_noise(z0, t, schedule, eps)
    pred = predict_noise(z_t, t, cond, model)
    loss = F.mse_loss(pred, eps)
    if return_parts:
        return loss, {"t": t, "eps": eps, "z_t": z_t, "pred": pred}
    return loss


# ------------------------------------------------------------------ EMA


@dataclass
class EmaState:
    decay: float
    shadow: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.decay < 1:
            raise ValueError("decay must lie in [0, 1)")

    @classmethod
    def from_model(cls, model: nn.Module, decay: float) -> "EmaState":
        return cls(decay, {k: v.detach().clone() for k, v in model.state_dict().items()})

    def copy_to(self, model: nn.Module) -> None:
        model.load_state_dict(self.shadow)


def _named(params) -> dict:
    if isinstance(params, nn.Module):
        return params.state_dict()
    return dict(params)


@torch.no_grad()
def ema_update(ema: EmaState, params) -> EmaState:
    """``shadow <- decay * shadow + (1 - decay) * params`` in place."""
    live = _named(params)
    if set(live) != set(ema.shadow):
        raise ValueError("EMA shadow and live parameters have different names")
    for k, v in live.items():
        sh = ema.shadow[k]
        if sh.shape != v.shape:
            raise ValueError(f"shape mismatch for {k}: {tuple(sh.shape)} vs {tuple(v.shape)}")
        if sh.is_floating_point():
            sh.mul_(ema.decay).add_(v.detach(), alpha=1.0 - ema.decay)
        else:
            sh.copy_(v)
    return ema


# ------------------------------------------------------------------ training


def save_checkpoint(path, model: UNet, ema: EmaState, schedule: NoiseSchedule, *, epoch=0, step=0,
                    optimizer=None, extra=None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg), "state_dict": model.state_dict(),
        "ema_decay": ema.decay, "ema": ema.shadow,
        "schedule_fingerprint": schedule.fingerprint(), "beta": schedule.beta,
        "epoch": epoch, "step": step, "extra": extra or {},
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, use_ema: bool = True) -> tuple[UNet, dict]:
    """Rebuild the estimator; EMA weights are loaded unless ``use_ema=False``."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a diffusion checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported diffusion checkpoint version {payload.get('version')}")
    model = UNet(EstimatorConfig(**payload["config"]))
    model.load_state_dict(payload["ema"] if use_ema else payload["state_dict"])
    model.eval()
    return model, payload


LOG_FIELDS = ["epoch", "loss", "lr"]


def train_ldm(z0, cond, schedule: NoiseSchedule, offset_cfg: OffsetNoiseConfig, config: EstimatorConfig,
              epochs: int, *, seed: int = 0, checkpoint_path=None, log_path=None, resume: bool = True,
              extra=None) -> tuple[UNet, EmaState, list[dict]]:
    """Train the estimator on paired latents ``(z0, cond)`` of shape ``(N, C, h, w)``.

    AdamW with a step-decayed learning rate; EMA is updated after every
    optimizer step. Returns the live model, its EMA state and the per-epoch
    loss log.
    """
    z0 = torch.as_tensor(z0, dtype=torch.float32)
    cond = torch.as_tensor(cond, dtype=torch.float32)
    if z0.shape != cond.shape:
        raise ValueError("z0 and cond must have the same shape")
    if z0.shape[0] == 0:
        raise ValueError("empty latent corpus")
    torch.manual_seed(seed)
    model = UNet(config)
    ema = EmaState.from_model(model, config.ema_decay)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr)
    start_epoch, step = 0, 0
    if checkpoint_path and resume and os.path.exists(checkpoint_path):
        payload = torch.load(checkpoint_path, map_location="cpu", weights_only=False)
        if payload.get("schedule_fingerprint") != schedule.fingerprint():
            raise ValueError("checkpoint was trained with a different noise schedule")
        model.load_state_dict(payload["state_dict"])
        ema = EmaState(payload["ema_decay"], payload["ema"])
        if "optimizer" in payload:
            opt.load_state_dict(payload["optimizer"])
        start_epoch, step = payload["epoch"], payload["step"]
        logger.info("resuming diffusion training at epoch %d", start_epoch)
    n = z0.shape[0]
    log = []
    for epoch in range(start_epoch, epochs):
        lr = config.lr * config.lr_decay_gamma ** (epoch // config.lr_decay_epochs) if config.lr_decay_epochs > 0 else config.lr
        for grp in opt.param_groups:
            grp["lr"] = lr
        g = torch.Generator().manual_seed(seed * 100_003 + epoch)
        perm = torch.randperm(n, generator=g)
        model.train()
        total, batches = 0.0, 0
        for s in range(0, n, config.batch_size):
            idx = perm[s:s + config.batch_size]
            loss = diffusion_loss(z0[idx], cond[idx], schedule, offset_cfg, model, g)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite diffusion loss at epoch {epoch} step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            ema_update(ema, model)
            total += float(loss.detach())
            batches += 1
            step += 1
        row = {"epoch": epoch + 1, "loss": total / batches, "lr": lr}
        log.append(row)
        logger.info("ldm epoch %d: loss %.5f", epoch + 1, row["loss"])
        if checkpoint_path:
            save_checkpoint(checkpoint_path, model, ema, schedule, epoch=epoch + 1, step=step,
                            optimizer=opt, extra=extra)
        if log_path:
            new = not os.path.exists(log_path)
            with open(log_path, "a", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
                if new:
                    w.writeheader()
                w.writerow(row)
    model.eval()
    return model, ema, log
