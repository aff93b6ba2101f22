"""Self-refining diffusion at desk scale.

A DDPM whose second training phase feeds flaw activation maps (Grad-CAM on a
real-vs-generated classifier) back into both the forward noise and the
denoiser's attention.
"""

__version__ = "0.1.0"

from .denoiser import DenoiserConfig, UNetDenoiser, modulated_attention
from .diffusion import DivergenceError, NoiseSchedule, make_linear_schedule, sample, sr_loss
from .estimator import SelfRefiningDiffusion
from .highlighter import FlawHighlighter, cam, grad_cam, mean_fam
from .inpainting import MaskKind, make_mask, repaint_sample
from .metrics import desk_fid, frechet_distance, psnr, ssim
from .trainer import TrainConfig, Trainer, run_training

__all__ = [
    "__version__",
    "DenoiserConfig",
    "UNetDenoiser",
    "modulated_attention",
    "DivergenceError",
    "NoiseSchedule",
    "make_linear_schedule",
    "sample",
    "sr_loss",
    "SelfRefiningDiffusion",
    "FlawHighlighter",
    "cam",
    "grad_cam",
    "mean_fam",
    "MaskKind",
    "make_mask",
    "repaint_sample",
    "desk_fid",
    "frechet_distance",
    "psnr",
    "ssim",
    "TrainConfig",
    "Trainer",
    "run_training",
]
