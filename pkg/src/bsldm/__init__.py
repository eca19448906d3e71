"""Bone suppression in chest radiographs with a conditional latent diffusion model."""
from .config import ExperimentConfig, load_config
from .estimator import BoneSuppressor, LatentCompressor
from .metrics import bsr, lpips, mse_psnr, psd_profile
from .sampler import ThresholdPolicy, apply_threshold, reverse_step, sample_latents, sample_soft_tissue
from .schedules import OffsetNoiseConfig, forward_noise, make_cosine_schedule, sample_offset_noise

__version__ = "0.1.0"

__all__ = [
    "BoneSuppressor", "ExperimentConfig", "LatentCompressor", "OffsetNoiseConfig", "ThresholdPolicy",
    "apply_threshold", "bsr", "forward_noise", "load_config", "lpips", "make_cosine_schedule", "mse_psnr",
    "psd_profile", "reverse_step", "sample_latents", "sample_offset_noise", "sample_soft_tissue",
]
