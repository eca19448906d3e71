"""scikit-learn style wrappers around the two training stages.

``LatentCompressor`` is a transformer (images -> diffusion-space latents and
back); ``BoneSuppressor`` is a regressor mapping radiographs to soft-tissue
images. Both follow the usual ``get_params`` / ``set_params`` / ``fit``
conventions so they compose with sklearn utilities (``clone``, grid search).
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .conditional_ldm import EmaState, EstimatorConfig, train_ldm
from .data_pipeline import bone_image
from .metrics import bsr
from .sampler import ThresholdPolicy, sample_soft_tissue
from .schedules import OffsetNoiseConfig, make_cosine_schedule
from .vq_compressor import CompressorConfig, train_vqgan


def check_images(X, *, multiple_of: int = 1, name: str = "X") -> np.ndarray:
    """Validate an image stack and return it as ``(N, H, W)`` float32.

    Accepts ``(H, W)``, ``(N, H, W)`` or ``(N, 1, H, W)``. Values must be
    finite and inside ``[-1, 1]``; spatial dims must divide by ``multiple_of``.
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        X = X[None]
    elif X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 3:
        raise ValueError(f"{name} must be (N, H, W) grayscale images, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinite values")
    if X.min() < -1.0 - 1e-6 or X.max() > 1.0 + 1e-6:
        raise ValueError(f"{name} must be normalized to [-1, 1]")
    if X.shape[1] % multiple_of or X.shape[2] % multiple_of:
        raise ValueError(f"{name} spatial size {X.shape[1:]} not divisible by {multiple_of}")
    return X


def check_pairs(X, y, multiple_of: int = 1):
    X = check_images(X, multiple_of=multiple_of)
    y = check_images(y, multiple_of=multiple_of, name="y")
    if X.shape != y.shape:
        raise ValueError(f"X and y shapes differ: {X.shape} vs {y.shape}")
    return X, y


class LatentCompressor(TransformerMixin, BaseEstimator):
    """Quantized autoencoder as a transformer.

    ``fit`` trains on every image passed (radiographs and soft tissue
    together), ``transform`` returns scaled quantized latents and
    ``inverse_transform`` decodes latents back to images.
    """

    def __init__(self, r=4, latent_channels=3, codebook_size=1024, hidden_channels=(16, 32, 64),
                 lambda_l1=1.0, lambda_qua=1.0, lambda_per=1e-3, lambda_adv=1e-2, beta_commit=0.25,
                 epochs=10, batch_size=16, adv_warmup_steps=250, perceptual="random-conv",
                 disc_layers=2, random_state=0):
        self.r = r
        self.latent_channels = latent_channels
        self.codebook_size = codebook_size
        self.hidden_channels = hidden_channels
        self.lambda_l1 = lambda_l1
        self.lambda_qua = lambda_qua
        self.lambda_per = lambda_per
        self.lambda_adv = lambda_adv
        self.beta_commit = beta_commit
        self.epochs = epochs
        self.batch_size = batch_size
        self.adv_warmup_steps = adv_warmup_steps
        self.perceptual = perceptual
        self.disc_layers = disc_layers
        self.random_state = random_state

    def _config(self) -> CompressorConfig:
        return CompressorConfig(
            r=self.r, latent_channels=self.latent_channels, codebook_size=self.codebook_size,
            hidden_channels=tuple(self.hidden_channels), lambda_l1=self.lambda_l1, lambda_qua=self.lambda_qua,
            lambda_per=self.lambda_per, lambda_adv=self.lambda_adv, beta_commit=self.beta_commit,
            batch_size=self.batch_size, adv_warmup_steps=self.adv_warmup_steps, perceptual=self.perceptual,
            disc_layers=self.disc_layers)

    def fit(self, X, y=None):
        X = check_images(X, multiple_of=self.r)
        if y is not None:
            X = np.concatenate([X, check_images(y, multiple_of=self.r, name="y")])
        self.model_, self.history_ = train_vqgan(X, self._config(), self.epochs, seed=self.random_state)
        self.image_shape_ = X.shape[1:]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, multiple_of=self.r)
        return self.model_.to_latent(torch.from_numpy(X)[:, None]).numpy()

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        Z = torch.as_tensor(np.asarray(Z), dtype=torch.float32)
        if Z.dim() == 3:
            Z = Z[None]
        return self.model_.from_latent(Z)[:, 0].numpy()


class BoneSuppressor(RegressorMixin, BaseEstimator):
    """Radiograph -> soft-tissue regressor backed by a conditional latent diffusion model.

    ``fit(X, y)`` trains the compressor on both image sets (unless a fitted
    ``compressor`` is supplied) and then the noise estimator on their
    latents. ``predict`` samples with the EMA weights.
    """

    def __init__(self, compressor=None, base_channels=32, channel_mult=(1, 2, 2),
                 attention_resolutions=(8, 4), num_res_blocks=1, time_embed_dim=128,
                 T=1000, beta_min=0.008, beta_max=0.02, offset_lambda=0.1,
                 threshold="temporal", omega=0.003, intercept=1.4, percentile=99.5,
                 epochs=100, batch_size=16, lr=2e-4, ema_decay=0.995, random_state=0):
        self.compressor = compressor
        self.base_channels = base_channels
        self.channel_mult = channel_mult
        self.attention_resolutions = attention_resolutions
        self.num_res_blocks = num_res_blocks
        self.time_embed_dim = time_embed_dim
        self.T = T
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.offset_lambda = offset_lambda
        self.threshold = threshold
        self.omega = omega
        self.intercept = intercept
        self.percentile = percentile
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.ema_decay = ema_decay
        self.random_state = random_state

    def _policy(self) -> ThresholdPolicy:
        return ThresholdPolicy(self.threshold, self.omega, self.intercept, self.percentile)

    def fit(self, X, y):
        comp = self.compressor if self.compressor is not None else LatentCompressor(random_state=self.random_state)
        X, y = check_pairs(X, y, multiple_of=comp.r)
        if not hasattr(comp, "model_"):
            comp = comp.fit(X, y)
        self.compressor_ = comp
        cond, z0 = comp.transform(X), comp.transform(y)
        cfg = EstimatorConfig(
            latent_channels=z0.shape[1], base_channels=self.base_channels, channel_mult=tuple(self.channel_mult),
            attention_resolutions=tuple(self.attention_resolutions), num_res_blocks=self.num_res_blocks,
            time_embed_dim=self.time_embed_dim, latent_size=z0.shape[-1], lr=self.lr, ema_decay=self.ema_decay,
            batch_size=self.batch_size, lr_decay_epochs=max(1, int(0.8 * self.epochs)))
        self.schedule_ = make_cosine_schedule(self.T, self.beta_min, self.beta_max)
        model, ema, self.history_ = train_ldm(z0, cond, self.schedule_, OffsetNoiseConfig(self.offset_lambda),
                                              cfg, self.epochs, seed=self.random_state)
        ema.copy_to(model)
        self.estimator_ = model
        return self

    def predict(self, X, seed=None):
        check_is_fitted(self, "estimator_")
        X = check_images(X, multiple_of=self.compressor_.r)
        seed = self.random_state if seed is None else seed
        return sample_soft_tissue(X, self.compressor_.model_, self.estimator_, self.schedule_,
                                  self._policy(), seed=seed)

    def score(self, X, y, sample_weight=None):
        """Mean bone suppression ratio, with bone taken as ``max(X - y, 0)``."""
        X, y = check_pairs(X, y)
        pred = self.predict(X)
        unit = lambda a: (np.asarray(a, dtype=np.float64) + 1) / 2  # noqa: E731
        vals = [bsr(unit(t), unit(p), bone_image(unit(x), unit(t))) for x, t, p in zip(X, y, pred)]
        return float(np.average(vals, weights=sample_weight))
