"""Bone-suppression metrics and radially averaged power spectra.

Metric functions take 2-D arrays already rescaled to ``[0, 1]``
(``max_value=1``); use :func:`to_unit_range` on ``[-1, 1]`` model outputs.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn


def to_unit_range(img):
    return (np.asarray(img, dtype=np.float64) + 1.0) / 2.0


def _pair(S, S_hat):
    S = np.asarray(S, dtype=np.float64)
    S_hat = np.asarray(S_hat, dtype=np.float64)
    if S.shape != S_hat.shape:
        raise ValueError(f"shape mismatch {S.shape} vs {S_hat.shape}")
    return S, S_hat


def bsr(S, S_hat, B) -> float:
    """Bone suppression ratio ``1 - sum((S - S_hat)^2) / sum(B^2)``."""
    S, S_hat = _pair(S, S_hat)
    B = np.asarray(B, dtype=np.float64)
    if B.shape != S.shape:
        raise ValueError(f"bone image shape {B.shape} != {S.shape}")
    denom = float(np.sum(B * B))
    if denom <= 0:
        raise ZeroDivisionError("bone image has zero energy; BSR is undefined")
    return 1.0 - float(np.sum((S - S_hat) ** 2)) / denom


def mse_psnr(S, S_hat, max_value: float = 1.0) -> tuple[float, float]:
    """Mean squared error and PSNR in dB (``inf`` for identical images)."""
    if max_value <= 0:
        raise ValueError("max_value must be positive")
    S, S_hat = _pair(S, S_hat)
    mse = float(np.mean((S - S_hat) ** 2))
    if mse == 0:
        return 0.0, math.inf
    return mse, 10.0 * math.log10(max_value ** 2 / mse)


# ------------------------------------------------------------------ LPIPS


class IdentityExtractor(nn.Module):
    """One 'layer' whose features are the image itself; LPIPS then equals MSE."""

    name = "identity"

    def forward(self, x):
        return [x]


class RandomConvExtractor(nn.Module):
    """Fixed-weight conv feature pyramid seeded deterministically.

    Offline stand-in for a pre-trained perceptual network. Weights never
    train; the same seed always gives the same extractor.
    """

    name = "random-conv"

    def __init__(self, channels=(16, 32, 64), seed: int = 1234):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        layers, c_in = [], 1
        for c in channels:
            conv = nn.Conv2d(c_in, c, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * math.sqrt(2.0 / (9 * c_in)))
                conv.bias.zero_()
            layers.append(conv)
            c_in = c
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, x):
        feats = []
        for i, conv in enumerate(self.layers):
            if i > 0:
                x = nn.functional.avg_pool2d(x, 2)
            x = torch.relu(conv(x))
            feats.append(x)
        return feats


class VGG16Extractor(nn.Module):
    """Pre-trained VGG16 feature taps (relu1_2 .. relu4_3).

    Requires torchvision and cached ImageNet weights; raises instead of
    falling back when either is missing.
    """

    name = "vgg16"
    taps = (3, 8, 15, 22)

    def __init__(self):
        super().__init__()
        try:
            from torchvision.models import VGG16_Weights, vgg16
            net = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
        except Exception as exc:  # noqa: BLE001 - any load failure means unavailable
            raise RuntimeError(f"VGG16 perceptual extractor unavailable: {exc}") from exc
        self.features = net.features[: max(self.taps) + 1].eval()
        self.requires_grad_(False)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x):
        # inputs are [-1, 1] grayscale
        x = ((x + 1) / 2).repeat(1, 3, 1, 1)
        x = (x - self.mean) / self.std
        feats = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.taps:
                feats.append(x)
        return feats


class LearnedLPIPS(nn.Module):
    """Standard LPIPS with learned per-channel weights (``lpips`` package, VGG backbone).

    Unlike the other extractors it scores a pair directly through
    :meth:`distance`. Raises when the package or its weights are unavailable.
    """

    name = "lpips-learned"

    def __init__(self):
        super().__init__()
        try:
            import lpips as lpips_pkg
            self.model = lpips_pkg.LPIPS(net="vgg", verbose=False).eval()
        except Exception as exc:  # noqa: BLE001 - any load failure means unavailable
            raise RuntimeError(f"learned LPIPS unavailable: {exc}") from exc
        self.requires_grad_(False)

    def distance(self, a, b):
        # inputs are [-1, 1] grayscale
        return self.model(a.repeat(1, 3, 1, 1), b.repeat(1, 3, 1, 1)).flatten()


def make_extractor(kind: str = "random-conv", seed: int = 1234) -> nn.Module:
    if kind == "identity":
        return IdentityExtractor()
    if kind == "random-conv":
        return RandomConvExtractor(seed=seed)
    if kind == "vgg16":
        return VGG16Extractor()
    if kind == "lpips-learned":
        return LearnedLPIPS()
    raise ValueError(f"unknown extractor {kind!r}")


def extractor_distance(extractor: nn.Module, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-sample perceptual distance between two image batches."""
    if hasattr(extractor, "distance"):
        return extractor.distance(a, b)
    return feature_distance(extractor(a), extractor(b))


def feature_distance(feats_a, feats_b) -> torch.Tensor:
    """Per-sample mean over layers of mean squared feature differences."""
    per_layer = [((fa - fb) ** 2).flatten(1).mean(dim=1) for fa, fb in zip(feats_a, feats_b)]
    return torch.stack(per_layer).mean(dim=0)


def lpips(S, S_hat, extractor: nn.Module | None) -> float:
    """Feature-space distance averaged over positions and channels per layer.

    Images are 2-D arrays in the same range the extractor expects. The value
    is averaged across the extractor's layers.
    """
    if extractor is None:
        raise RuntimeError("LPIPS requires an explicit feature extractor")
    S, S_hat = _pair(S, S_hat)
    param = next(extractor.parameters(), None)
    dtype = torch.float64 if param is None else param.dtype
    a = torch.as_tensor(S, dtype=dtype)[None, None]
    b = torch.as_tensor(S_hat, dtype=dtype)[None, None]
    with torch.no_grad():
        return float(extractor_distance(extractor, a, b)[0])


# ------------------------------------------------------------------ reports


def summarize(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std())


def format_mean_std(mean: float, std: float, digits: int = 3) -> str:
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


@dataclass
class MetricReport:
    """Per-image metric rows plus mean ± std summaries."""

    rows: list[dict] = field(default_factory=list)
    extractor: str = "random-conv"

    METRICS = ("bsr", "mse", "psnr", "lpips")

    def summary(self) -> dict:
        out = {"n": len(self.rows), "lpips_extractor": self.extractor}
        for m in self.METRICS:
            mean, std = summarize([r[m] for r in self.rows])
            out[m] = {"mean": mean, "std": std}
        return out

    def summary_table(self) -> dict[str, str]:
        s = self.summary()
        digits = {"bsr": 3, "mse": 4, "psnr": 3, "lpips": 3}
        return {m: format_mean_std(s[m]["mean"], s[m]["std"], digits[m]) for m in self.METRICS}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["id", *self.METRICS])
            w.writeheader()
            w.writerows(self.rows)

    def write_json(self, path) -> None:
        s = self.summary()
        s["formatted"] = self.summary_table()
        with open(path, "w") as fh:
            json.dump(s, fh, indent=2, sort_keys=True)


def evaluate_set(ids, targets, predictions, bones, extractor=None, extractor_name=None) -> MetricReport:
    """Score ``[0, 1]`` predictions against targets; LPIPS on ``[-1, 1]`` inputs."""
    report = MetricReport(extractor=extractor_name or getattr(extractor, "name", "none"))
    for i, S, S_hat, B in zip(ids, targets, predictions, bones):
        mse, psnr = mse_psnr(S, S_hat)
        lp = lpips(2 * np.asarray(S) - 1, 2 * np.asarray(S_hat) - 1, extractor) if extractor is not None else math.nan
        report.rows.append({"id": i, "bsr": bsr(S, S_hat, B), "mse": mse, "psnr": psnr, "lpips": lp})
    return report


# ------------------------------------------------------------------ spectra


@dataclass
class PsdProfile:
    frequencies: np.ndarray
    power: np.ndarray
    counts: np.ndarray
    n_samples: int

    def to_db(self) -> np.ndarray:
        return 10.0 * np.log10(np.maximum(self.power, 1e-300))


def psd_profile(images, n_bins: int = 32) -> PsdProfile:
    """Radially averaged squared DFT magnitude, averaged over an image set.

    Frequencies are radial distances in cycles/pixel ``[0, 0.5*sqrt(2)]``,
    binned uniformly into ``n_bins`` bins; bin 0 holds the DC term.
    Power is normalized by the pixel count so white noise of unit variance
    has unit power.
    """
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 2:
        imgs = imgs[None]
    if imgs.size == 0 or imgs.shape[0] == 0:
        raise ValueError("empty image set")
    n, h, w = imgs.shape
    if h != w:
        raise ValueError("psd_profile expects square images")
    power = np.mean(np.abs(np.fft.fft2(imgs)) ** 2, axis=0) / (h * w)
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radius = np.sqrt(fx ** 2 + fy ** 2)
    r_max = radius.max()
    edges = np.linspace(0.0, r_max, n_bins + 1)
    # bin 0 is reserved for the DC term so it never mixes with low frequencies
    idx = np.clip(np.searchsorted(edges, radius, side="left"), 1, n_bins) - 1
    idx[radius == 0] = 0
    counts = np.bincount(idx.ravel(), minlength=n_bins)
    sums = np.bincount(idx.ravel(), weights=power.ravel(), minlength=n_bins)
    with np.errstate(invalid="ignore"):
        prof = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    centers = 0.5 * (edges[:-1] + edges[1:])
    centers[0] = 0.0
    return PsdProfile(frequencies=centers, power=prof, counts=counts, n_samples=n)
