"""Vector-quantized perceptual compressor with a multi-level hybrid loss.

One compressor is shared by radiographs and soft-tissue images. Images are
``(N, 1, H, W)`` tensors in ``[-1, 1]``; latents are ``(N, C, H/r, W/r)``.
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

from .metrics import extractor_distance, make_extractor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "bsldm-vqgan"
CHECKPOINT_VERSION = 1


@dataclass
class CompressorConfig:
    r: int = 8
    latent_channels: int = 3
    codebook_size: int = 1024
    hidden_channels: tuple = (64, 128, 128, 256)
    lambda_l1: float = 1.0
    lambda_qua: float = 1.0
    lambda_per: float = 1e-3
    lambda_adv: float = 1e-2
    beta_commit: float = 0.25
    disc_layers: int = 3
    disc_channels: int = 64
    adv_warmup_steps: int = 10_000
    lr_gen: float = 1e-4
    lr_disc: float = 5e-4
    lr_decay_epochs: int = 500
    lr_decay_gamma: float = 0.5
    batch_size: int = 4
    perceptual: str = "vgg16"

    def __post_init__(self):
        self.hidden_channels = tuple(int(c) for c in self.hidden_channels)
        if self.r < 1 or self.r & (self.r - 1):
            raise ValueError(f"downsampling factor r must be a power of two, got {self.r}")
        if len(self.hidden_channels) < self.n_down + 1:
            raise ValueError(f"need {self.n_down + 1} hidden channel widths for r={self.r}")
        for name in ("lambda_l1", "lambda_qua", "lambda_per", "lambda_adv", "beta_commit"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.codebook_size < 2:
            raise ValueError("codebook needs at least 2 codes")

    @property
    def n_down(self) -> int:
        return int(math.log2(self.r))


def _groups(ch: int) -> int:
    for g in (32, 16, 8, 4, 2):
        if ch % g == 0 and ch // g >= 2:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Encoder(nn.Module):
    def __init__(self, cfg: CompressorConfig):
        super().__init__()
        ch = cfg.hidden_channels
        self.conv_in = nn.Conv2d(1, ch[0], 3, padding=1)
        blocks = []
        for i in range(cfg.n_down):
            blocks += [ResBlock(ch[i], ch[i]), nn.Conv2d(ch[i], ch[i + 1], 4, stride=2, padding=1)]
        last = ch[cfg.n_down]
        blocks += [ResBlock(last, last)]
        self.blocks = nn.Sequential(*blocks)
        self.norm_out = nn.GroupNorm(_groups(last), last)
        self.conv_out = nn.Conv2d(last, cfg.latent_channels, 1)

    def forward(self, x):
        h = self.blocks(self.conv_in(x))
        return self.conv_out(F.silu(self.norm_out(h)))


class Decoder(nn.Module):
    def __init__(self, cfg: CompressorConfig):
        super().__init__()
        ch = cfg.hidden_channels
        last = ch[cfg.n_down]
        self.conv_in = nn.Conv2d(cfg.latent_channels, last, 3, padding=1)
        blocks = [ResBlock(last, last)]
        for i in reversed(range(cfg.n_down)):
            blocks += [nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(ch[i + 1], ch[i], 3, padding=1), ResBlock(ch[i], ch[i])]
        self.blocks = nn.Sequential(*blocks)
        self.norm_out = nn.GroupNorm(_groups(ch[0]), ch[0])
        self.conv_out = nn.Conv2d(ch[0], 1, 3, padding=1)

    def forward(self, z):
        return self.conv_out(F.silu(self.norm_out(self.blocks(self.conv_in(z)))))


@dataclass
class QuantizeResult:
    z_q: torch.Tensor  # straight-through: forward value is the code, gradient flows to z
    indices: torch.Tensor
    codebook_term: torch.Tensor  # ||sg(z) - z_q||^2
    commit_term: torch.Tensor  # ||z - sg(z_q)||^2


def nearest_codes(flat: torch.Tensor, codes: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
    """Index of the nearest code for each row; ties go to the lowest index.

    Distances are computed as explicit squared differences so equal
    distances compare equal bit-for-bit.
    """
    if codes.shape[0] == 0:
        raise ValueError("empty codebook")
    if flat.shape[1] != codes.shape[1]:
        raise ValueError(f"code dim {codes.shape[1]} != latent channels {flat.shape[1]}")
    out = []
    step = max(1, chunk * 64 // max(codes.shape[0], 1))
    for start in range(0, flat.shape[0], step):
        blk = flat[start:start + step]
        d = ((blk[:, None, :] - codes[None, :, :]) ** 2).sum(-1)
        out.append(torch.argmin(d, dim=1))  # argmin returns the first minimum
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


def quantize(z: torch.Tensor, codes: torch.Tensor) -> QuantizeResult:
    """Replace each spatial latent vector by its nearest code."""
    n, c, h, w = z.shape
    flat = z.permute(0, 2, 3, 1).reshape(-1, c)
    with torch.no_grad():
        idx = nearest_codes(flat.detach(), codes.detach())
    zq = codes[idx].reshape(n, h, w, c).permute(0, 3, 1, 2)
    codebook_term = F.mse_loss(zq, z.detach())
    commit_term = F.mse_loss(z, zq.detach())
    z_st = zq.detach() + (z - z.detach())  # exact code values forward, identity gradient to z
    return QuantizeResult(z_st, idx.reshape(n, h, w), codebook_term, commit_term)


class VectorQuantizer(nn.Module):
    def __init__(self, n_codes: int, dim: int, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.codes = nn.Parameter(torch.rand(n_codes, dim, generator=g) * 2 - 1)

    def forward(self, z):
        return quantize(z, self.codes)


class PatchDiscriminator(nn.Module):
    """PatchGAN classifier; outputs per-patch logits."""

    def __init__(self, n_layers: int = 3, ch: int = 64):
        super().__init__()
        layers = [nn.Conv2d(1, ch, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        c = ch
        for i in range(1, n_layers):
            c_next = ch * min(2 ** i, 8)
            layers += [nn.Conv2d(c, c_next, 4, stride=2, padding=1), nn.GroupNorm(_groups(c_next), c_next), nn.LeakyReLU(0.2)]
            c = c_next
        c_next = ch * min(2 ** n_layers, 8)
        layers += [nn.Conv2d(c, c_next, 4, stride=1, padding=1), nn.GroupNorm(_groups(c_next), c_next), nn.LeakyReLU(0.2),
                   nn.Conv2d(c_next, 1, 4, stride=1, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class VQGAN(nn.Module):
    def __init__(self, cfg: CompressorConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(seed)
        self.encoder = Encoder(cfg)
        self.quantizer = VectorQuantizer(cfg.codebook_size, cfg.latent_channels, seed=seed)
        self.decoder = Decoder(cfg)
        # maps quantized latents into roughly [-1, 1] for the diffusion stage
        self.register_buffer("latent_scale", torch.tensor(1.0))

    def _check_image(self, x):
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (N, 1, H, W) images, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % self.cfg.r or w % self.cfg.r:
            raise ValueError(f"image size {h}x{w} not divisible by r={self.cfg.r}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check_image(x)
        return self.encoder(x)

    def quantize(self, z: torch.Tensor) -> QuantizeResult:
        return self.quantizer(z)

    def decode(self, z_q: torch.Tensor) -> torch.Tensor:
        if z_q.dim() != 4 or z_q.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"expected (N, {self.cfg.latent_channels}, h, w) latents, got {tuple(z_q.shape)}")
        return self.decoder(z_q).clamp(-1.0, 1.0)

    def forward(self, x):
        q = self.quantize(self.encode(x))
        return self.decoder(q.z_q), q

    @torch.no_grad()
    def to_latent(self, x: torch.Tensor) -> torch.Tensor:
        """Quantized, scaled latent used by the diffusion stage."""
        return self.quantize(self.encode(x)).z_q * self.latent_scale

    @torch.no_grad()
    def from_latent(self, z: torch.Tensor) -> torch.Tensor:
        """Snap a diffusion-space latent to the codebook and decode."""
        q = self.quantize(z / self.latent_scale)
        return self.decode(q.z_q)


# ------------------------------------------------------------------ losses


@dataclass
class ReconLossReport:
    l1: torch.Tensor
    perceptual: torch.Tensor
    adversarial: torch.Tensor
    quantization: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("l1", "perceptual", "adversarial", "quantization", "total")}


def quantization_loss(codebook_term, commit_term, beta_commit: float):
    return codebook_term + beta_commit * commit_term


def hybrid_loss(x, x_hat, disc_score, commit_terms, config: CompressorConfig, extractor=None) -> ReconLossReport:
    """Weighted L1 + perceptual + adversarial + quantization loss.

    ``disc_score`` holds discriminator probabilities in ``(0, 1]`` for the
    reconstruction (``None`` disables the adversarial term);
    ``commit_terms`` is ``(codebook_term, commit_term)``.
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    zero = x_hat.new_zeros(())
    l1 = (x - x_hat).abs().mean()
    if config.lambda_per > 0:
        if extractor is None:
            raise ValueError("perceptual loss weight > 0 needs a feature extractor")
        per = extractor_distance(extractor, x, x_hat).mean()
    else:
        per = zero
    if disc_score is None:
        adv = zero
    else:
        disc_score = torch.as_tensor(disc_score, dtype=x_hat.dtype)
        if torch.any(disc_score <= 0) or torch.any(disc_score > 1) or not torch.all(torch.isfinite(disc_score)):
            raise ValueError("discriminator scores must lie in (0, 1]")
        adv = -torch.log(disc_score).mean()
    qua = quantization_loss(commit_terms[0], commit_terms[1], config.beta_commit)
    qua = torch.as_tensor(qua, dtype=x_hat.dtype)
    total = (config.lambda_l1 * l1 + config.lambda_per * per
             + config.lambda_adv * adv + config.lambda_qua * qua)
    return ReconLossReport(l1, per, adv, qua, total)


# ------------------------------------------------------------------ training


def save_checkpoint(path, model: VQGAN, *, epoch: int = 0, step: int = 0, disc=None,
                    opt_g=None, opt_d=None, extra=None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg), "state_dict": model.state_dict(),
        "epoch": epoch, "step": step, "extra": extra or {},
    }
    if disc is not None:
        payload["disc"] = disc.state_dict()
    if opt_g is not None:
        payload["opt_g"] = opt_g.state_dict()
    if opt_d is not None:
        payload["opt_d"] = opt_d.state_dict()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[VQGAN, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a compressor checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported compressor checkpoint version {payload.get('version')}")
    model = VQGAN(CompressorConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


LOG_FIELDS = ["epoch", "l1", "perceptual", "adversarial", "quantization", "total", "codebook_usage"]


def _append_log(path, row):
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if new:
            w.writeheader()
        w.writerow(row)


def step_lr(base: float, epoch: int, every: int, gamma: float) -> float:
    return base * gamma ** (epoch // every) if every > 0 else base


@torch.no_grad()
def fit_latent_scale(model: VQGAN, images: torch.Tensor, batch: int = 64) -> float:
    """Scale so the largest quantized latent magnitude on ``images`` is 1."""
    peak = 0.0
    for s in range(0, images.shape[0], batch):
        z = model.quantize(model.encode(images[s:s + batch])).z_q
        peak = max(peak, float(z.abs().max()))
    scale = 1.0 / peak if peak > 0 else 1.0
    model.latent_scale.fill_(scale)
    return scale


def train_vqgan(images, config: CompressorConfig, epochs: int, *, seed: int = 0,
                checkpoint_path=None, log_path=None, resume: bool = True,
                extractor=None, extra=None) -> tuple[VQGAN, list[dict]]:
    """Alternating generator / patch-discriminator optimization.

    ``images`` is an ``(N, H, W)`` or ``(N, 1, H, W)`` array in ``[-1, 1]``
    holding both radiographs and soft-tissue images. Training continues from
    ``checkpoint_path`` when it exists and ``resume`` is set; the checkpoint
    is rewritten and the CSV log appended after every epoch.
    """
    x_all = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if x_all.dim() == 3:
        x_all = x_all[:, None]
    if x_all.shape[0] == 0:
        raise ValueError("empty training corpus")
    torch.manual_seed(seed)
    model = VQGAN(config, seed=seed)
    disc = PatchDiscriminator(config.disc_layers, config.disc_channels)
    opt_g = torch.optim.Adam(list(model.encoder.parameters()) + list(model.decoder.parameters())
                             + list(model.quantizer.parameters()), lr=config.lr_gen, betas=(0.5, 0.9))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr_disc, betas=(0.5, 0.9))
    start_epoch, step = 0, 0
    if checkpoint_path and resume and os.path.exists(checkpoint_path):
        _, payload = load_checkpoint(checkpoint_path)
        model.load_state_dict(payload["state_dict"])
        if "disc" in payload:
            disc.load_state_dict(payload["disc"])
        if "opt_g" in payload:
            opt_g.load_state_dict(payload["opt_g"])
        if "opt_d" in payload:
            opt_d.load_state_dict(payload["opt_d"])
        start_epoch, step = payload["epoch"], payload["step"]
        logger.info("resuming compressor training at epoch %d", start_epoch)
    if extractor is None and config.lambda_per > 0:
        extractor = make_extractor(config.perceptual)
    log = []
    n = x_all.shape[0]
    for epoch in range(start_epoch, epochs):
        for opt, base in ((opt_g, config.lr_gen), (opt_d, config.lr_disc)):
            for grp in opt.param_groups:
                grp["lr"] = step_lr(base, epoch, config.lr_decay_epochs, config.lr_decay_gamma)
        g = torch.Generator().manual_seed(seed * 100_003 + epoch)
        perm = torch.randperm(n, generator=g)
        model.train()
        sums = dict.fromkeys(LOG_FIELDS[1:-1], 0.0)
        used = torch.zeros(config.codebook_size, dtype=torch.bool)
        batches = 0
        for s in range(0, n, config.batch_size):
            x = x_all[perm[s:s + config.batch_size]]
            x_hat, q = model(x)
            used[q.indices.unique()] = True
            adv_on = config.lambda_adv > 0 and step >= config.adv_warmup_steps
            score = torch.sigmoid(disc(x_hat)).clamp_min(1e-6) if adv_on else None
            rep = hybrid_loss(x, x_hat, score, (q.codebook_term, q.commit_term), config, extractor)
            if not torch.isfinite(rep.total):
                raise FloatingPointError(f"non-finite compressor loss at epoch {epoch} step {step}: {rep.as_floats()}")
            opt_g.zero_grad(set_to_none=True)
            rep.total.backward()
            opt_g.step()
            if adv_on:
                real = disc(x)
                fake = disc(x_hat.detach())
                d_loss = 0.5 * (F.binary_cross_entropy_with_logits(real, torch.ones_like(real))
                                + F.binary_cross_entropy_with_logits(fake, torch.zeros_like(fake)))
                opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                opt_d.step()
            for k, v in rep.as_floats().items():
                sums[k] += v
            batches += 1
            step += 1
        row = {"epoch": epoch + 1, **{k: v / batches for k, v in sums.items()},
               "codebook_usage": float(used.float().mean())}
        log.append(row)
        logger.info("vqgan epoch %d: %s", epoch + 1, row)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, model, epoch=epoch + 1, step=step, disc=disc, opt_g=opt_g, opt_d=opt_d,
                            extra={**(extra or {}), "complete": False})
        if log_path:
            _append_log(log_path, row)
    model.eval()
    fit_latent_scale(model, x_all)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, epoch=max(epochs, start_epoch), step=step,
                        disc=disc, opt_g=opt_g, opt_d=opt_d, extra={**(extra or {}), "complete": True})
    return model, log
