"""Scikit-learn style front end for the self-refining diffusion model."""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_generator, check_images
from .denoiser import DenoiserConfig
from .diffusion import sample
from .inpainting import repaint_sample
from .trainer import TrainConfig, Trainer, run_training

_DENOISER_PARAMS = ("base_channels", "channel_multipliers", "attention_resolutions", "time_embed_dim", "num_heads")


class SelfRefiningDiffusion(BaseEstimator):
    """Unconditional image diffusion model trained base-then-refine.

    Every :class:`~srdiff.trainer.TrainConfig` field is a constructor parameter,
    plus the denoiser architecture parameters. ``fit(X)`` takes ``(N, C, H, W)``
    images in [-1, 1] (square). With ``lambda_fwd = lambda_rev = 0`` the model is
    a plain DDPM.

    Attributes
    ----------
    model_ : UNetDenoiser
    schedule_ : NoiseSchedule
    log_ : list of LogRecord
    highlighter_ : FlawHighlighter or None
    guidance_map_ : ndarray or None
        The guidance map in use at the end of training.
    """

    def __init__(
        self,
        total_steps=40_000,
        base_steps=20_000,
        cycle=100,
        lambda_fwd=0.01,
        lambda_rev=0.025,
        batch_size=32,
        learning_rate=5e-4,
        seed=0,
        refresh_sample_count=16,
        T=200,
        beta_start=1e-4,
        beta_end=0.02,
        guidance="fam",
        refresh_sample_steps=None,
        highlighter_samples=128,
        highlighter_epochs=30,
        highlighter_channels=(16, 32, 32),
        retrain_highlighter=False,
        sigma_frac=0.25,
        edge_low=0.3,
        edge_high=0.6,
        edge_blur=1.0,
        checkpoint_every=5000,
        base_channels=16,
        channel_multipliers=(1, 2),
        attention_resolutions=(8,),
        time_embed_dim=32,
        num_heads=1,
    ):
        self.total_steps = total_steps
        self.base_steps = base_steps
        self.cycle = cycle
        self.lambda_fwd = lambda_fwd
        self.lambda_rev = lambda_rev
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.refresh_sample_count = refresh_sample_count
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.guidance = guidance
        self.refresh_sample_steps = refresh_sample_steps
        self.highlighter_samples = highlighter_samples
        self.highlighter_epochs = highlighter_epochs
        self.highlighter_channels = highlighter_channels
        self.retrain_highlighter = retrain_highlighter
        self.sigma_frac = sigma_frac
        self.edge_low = edge_low
        self.edge_high = edge_high
        self.edge_blur = edge_blur
        self.checkpoint_every = checkpoint_every
        self.base_channels = base_channels
        self.channel_multipliers = channel_multipliers
        self.attention_resolutions = attention_resolutions
        self.time_embed_dim = time_embed_dim
        self.num_heads = num_heads

    def train_config(self) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def denoiser_config(self, image_shape) -> DenoiserConfig:
        c, h, w = image_shape
        if h != w:
            raise ValueError(f"images must be square, got {h}x{w}")
        return DenoiserConfig(in_channels=c, image_size=h, **{k: getattr(self, k) for k in _DENOISER_PARAMS})

    def fit(self, X, y=None, out_dir=None):
        X = check_images(X)
        result = run_training(self.train_config(), X, self.denoiser_config(X.shape[1:]), out_dir=out_dir)
        self._set_fitted(result.trainer)
        self.paths_ = result.paths
        return self

    def _set_fitted(self, trainer: Trainer):
        self.trainer_ = trainer
        self.model_ = trainer.model.eval()
        self.schedule_ = trainer.sched
        self.log_ = trainer.log
        self.highlighter_ = trainer.highlighter
        self.guidance_map_ = trainer.cycle.mfam
        self.image_shape_ = trainer.image_shape
        self.n_features_in_ = int(np.prod(trainer.image_shape))

    @classmethod
    def from_checkpoint(cls, path, dataset):
        trainer = Trainer.load(path, dataset)
        params = {k: v for k, v in trainer.cfg.to_dict().items() if k in cls._get_param_names()}
        params.update({k: getattr(trainer.denoiser_cfg, k) for k in _DENOISER_PARAMS})
        est = cls(**params)
        est._set_fitted(trainer)
        return est

    @property
    def loss_curve_(self):
        return np.array([r.loss for r in self.log_])

    def sample(self, n_samples=1, random_state=None, steps=None) -> np.ndarray:
        """Draw ``n_samples`` images by ancestral sampling (no guidance map involved)."""
        check_is_fitted(self, "model_")
        out = sample(self.model_, self.schedule_, self.image_shape_, as_generator(random_state), n_samples, steps=steps)
        return out.numpy()

    def inpaint(self, known, mask, jump_len=10, jump_n=2, random_state=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        return repaint_sample(self.model_, self.schedule_, known, mask, jump_len, jump_n,
                              as_generator(random_state)).numpy()


__all__ = ["SelfRefiningDiffusion"]
