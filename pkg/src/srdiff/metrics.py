"""Image-quality metrics: Fréchet distance over embeddings (desk-FID), PSNR, SSIM,
and a highlighter-feature perceptual distance.

``desk_fid`` uses a local embedder (the trained highlighter's pooled features by
default, or :class:`PixelPCAEmbedder`); its values are not comparable with
Inception-based FID.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.decomposition import PCA
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images

PSNR_INF = math.inf
PERCEPTUAL_LABEL = "highlighter-perceptual distance"


def _sqrtm_psd(mat):
    w, v = np.linalg.eigh((mat + mat.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _check_psd(cov, name, tol):
    w = np.linalg.eigvalsh((cov + cov.T) / 2.0)
    if w.size and w.min() < -tol * max(1.0, float(np.abs(w).max())):
        raise ValueError(f"{name} is not positive semidefinite (min eigenvalue {w.min():.3g})")


def frechet_distance(mu1, cov1, mu2, cov2, neg_tol: float = 1e-8) -> float:
    """Squared Fréchet distance between two Gaussians.

    ``||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})``; the trace of the square
    root is taken from the eigenvalues of the symmetric ``S1^{1/2} S2 S1^{1/2}``.
    """
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=np.float64))
    cov2 = np.atleast_2d(np.asarray(cov2, dtype=np.float64))
    d = mu1.shape[0]
    if mu2.shape != (d,) or cov1.shape != (d, d) or cov2.shape != (d, d):
        raise ValueError(f"dimension mismatch: mu {mu1.shape}/{mu2.shape}, cov {cov1.shape}/{cov2.shape}")
    _check_psd(cov1, "cov1", neg_tol)
    _check_psd(cov2, "cov2", neg_tol)

    # symmetric in the two arguments: average both orderings of the product
    def tr_sqrt(a, b):
        ra = _sqrtm_psd(a)
        w = np.linalg.eigvalsh(ra @ b @ ra)
        scale = max(1.0, float(np.abs(w).max())) if w.size else 1.0
        if w.size and w.min() < -neg_tol * scale:
            raise ValueError(f"covariance product has negative eigenvalue {w.min():.3g}")
        return float(np.sqrt(np.clip(w, 0.0, None)).sum())

    tr_covmean = 0.5 * (tr_sqrt(cov1, cov2) + tr_sqrt(cov2, cov1))
    diff = mu1 - mu2
    dist = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_covmean)
    return max(dist, 0.0)


def feature_stats(feats):
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ValueError(f"need at least 2 feature vectors, got shape {feats.shape}")
    return feats.mean(axis=0), np.cov(feats, rowvar=False).reshape(feats.shape[1], feats.shape[1])


class PixelPCAEmbedder(TransformerMixin, BaseEstimator):
    """Model-free embedder: flattened pixels projected on a PCA basis."""

    def __init__(self, n_components=16, random_state=0):
        self.n_components = n_components
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_images(X)
        flat = X.reshape(len(X), -1)
        k = min(self.n_components, flat.shape[0], flat.shape[1])
        self.pca_ = PCA(n_components=k, random_state=self.random_state).fit(flat)
        self.image_shape_ = X.shape[1:]
        return self

    def transform(self, X):
        check_is_fitted(self, "pca_")
        X = check_images(X)
        return self.pca_.transform(X.reshape(len(X), -1))


def _embed(embedder, X):
    if hasattr(embedder, "embed"):
        return embedder.embed(X)
    if hasattr(embedder, "transform"):
        return embedder.transform(X)
    return embedder(X)


def desk_fid(real_images, gen_images, embedder) -> float:
    """Fréchet distance between embedded feature statistics of two image sets."""
    real = check_images(real_images, name="real_images", min_samples=2)
    gen = check_images(gen_images, name="gen_images", min_samples=2)
    fr = np.asarray(_embed(embedder, real), dtype=np.float64)
    fg = np.asarray(_embed(embedder, gen), dtype=np.float64)
    if fr.ndim != 2 or fr.shape[1] < 2:
        raise ValueError(f"embedder must return (N, d>=2) features, got {fr.shape}")
    return frechet_distance(*feature_stats(fr), *feature_stats(fg))


def psnr(a, b, data_range: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``math.inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(data_range**2 / mse)


def _gauss_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    k = len(g)
    h, w = img.shape
    rows = sum(g[i] * img[:, i : w - k + 1 + i] for i in range(k))
    return sum(g[i] * rows[i : h - k + 1 + i] for i in range(k))


def _ssim_plane(a, b, data_range, win, sigma):
    g = _gauss_window(win, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a**2
    sbb = _filter_valid(b * b, g) - mu_b**2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, data_range: float = 2.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity with an ``11x11`` Gaussian window (sigma 1.5).

    Accepts ``(H, W)``, ``(C, H, W)`` or ``(N, C, H, W)``; the mean is taken over
    every valid window position, channel and image.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim < 2 or min(a.shape[-2:]) < win_size:
        raise ValueError(f"images must be at least {win_size}x{win_size}, got {a.shape[-2:]}")
    planes_a = a.reshape(-1, *a.shape[-2:])
    planes_b = b.reshape(-1, *b.shape[-2:])
    vals = [_ssim_plane(pa, pb, data_range, win_size, sigma).mean() for pa, pb in zip(planes_a, planes_b)]
    return float(np.mean(vals))


def perceptual_distance(a, b, highlighter) -> np.ndarray:
    """Highlighter-feature distance per image pair (LPIPS-style, unweighted).

    Per stage: unit-normalise features across channels at each location, take
    the squared difference summed over channels, average spatially; then
    average the stages.
    """
    fa = highlighter.stage_features(a)
    fb = highlighter.stage_features(b)
    total = 0.0
    for xa, xb in zip(fa, fb):
        na = xa / (xa.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-10)
        nb = xb / (xb.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-10)
        total = total + (na - nb).pow(2).sum(dim=1).mean(dim=(1, 2))
    return (total / len(fa)).numpy()


METRIC_FIELDS = ("metric", "split", "value", "seed")


def write_metric_rows(rows, csv_path=None, jsonl_path=None):
    """Write ``{"metric", "split", "value", "seed", ...}`` rows as CSV and/or JSON lines."""
    rows = list(rows)
    fields = list(METRIC_FIELDS) + sorted({k for r in rows for k in r} - set(METRIC_FIELDS))
    if csv_path:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)
    if jsonl_path:
        Path(jsonl_path).parent.mkdir(parents=True, exist_ok=True)
        with open(jsonl_path, "w") as fh:
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    return rows


__all__ = [
    "PSNR_INF",
    "PERCEPTUAL_LABEL",
    "frechet_distance",
    "feature_stats",
    "PixelPCAEmbedder",
    "desk_fid",
    "psnr",
    "ssim",
    "perceptual_distance",
    "write_metric_rows",
]
