"""Input validation helpers shared by the estimators and functional API."""

from __future__ import annotations

import numbers

import numpy as np
import torch
from sklearn.utils import check_array


def check_images(X, *, name="X", dtype=np.float32, min_samples=1):
    """Validate an image batch and return it as a C-contiguous ``(N, C, H, W)`` array.

    A single ``(H, W)`` image is promoted to ``(1, 1, H, W)`` and a ``(N, H, W)``
    stack to ``(N, 1, H, W)``. Non-finite values are rejected.
    """
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    X = check_array(
        X,
        dtype=dtype,
        ensure_2d=False,
        allow_nd=True,
        ensure_all_finite=True,
        ensure_min_samples=1,
        input_name=name,
    )
    if X.ndim == 2:
        X = X[None, None]
    elif X.ndim == 3:
        X = X[:, None]
    elif X.ndim != 4:
        raise ValueError(f"{name} must have 2, 3 or 4 dimensions, got shape {X.shape}")
    if X.shape[0] < min_samples:
        raise ValueError(f"{name} needs at least {min_samples} images, got {X.shape[0]}")
    if min(X.shape) < 1:
        raise ValueError(f"{name} has an empty axis: shape {X.shape}")
    return np.ascontiguousarray(X)


def check_map(m, *, name="map", shape=None):
    """Validate a 2-D guidance map with values in [0, 1]."""
    if isinstance(m, torch.Tensor):
        m = m.detach().cpu().numpy()
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D (H, W), got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite values")
    if m.size and (m.min() < 0.0 or m.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1], got [{m.min()}, {m.max()}]")
    if shape is not None and m.shape != tuple(shape):
        raise ValueError(f"{name} has shape {m.shape}, expected {tuple(shape)}")
    return m


def check_nonneg(value, name):
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be a finite real >= 0, got {value!r}")
    return float(value)


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def as_generator(seed_or_gen):
    """Return a CPU ``torch.Generator`` for an int seed, None, or an existing generator."""
    if isinstance(seed_or_gen, torch.Generator):
        return seed_or_gen
    gen = torch.Generator()
    if seed_or_gen is None:
        gen.seed()
    else:
        gen.manual_seed(int(seed_or_gen))
    return gen
