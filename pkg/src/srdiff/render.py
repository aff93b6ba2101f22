"""Deterministic rendering of maps and image grids to 8-bit rasters.

Heatmap colormap: piecewise linear over [0, 1] through blue (0, 0, 255) at 0,
yellow (255, 255, 0) at 0.5 and red (255, 0, 0) at 1.
Overlay: ``0.6 * image + 0.4 * colormap(map)``, clamped.
"""

from __future__ import annotations

import numpy as np

from ._validation import check_images

_STOPS = np.array([0.0, 0.5, 1.0])
_COLORS = np.array([[0.0, 0.0, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]])

OVERLAY_IMAGE_WEIGHT = 0.6
OVERLAY_MAP_WEIGHT = 0.4


def colormap(values) -> np.ndarray:
    """Map ``(H, W)`` values in [0, 1] to ``(3, H, W)`` RGB floats in [0, 1]."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.interp(v, _STOPS, _COLORS[:, c]) for c in range(3)])


def _quantize(rgb01):
    return np.round(np.clip(rgb01, 0.0, 1.0) * 255.0).astype(np.uint8)


def heatmap(values) -> np.ndarray:
    return _quantize(colormap(values))


def overlay(image, values) -> np.ndarray:
    """Blend a ``(C, H, W)`` image in [-1, 1] with the colormapped map; returns uint8 RGB."""
    img = (np.asarray(image, dtype=np.float64) + 1.0) / 2.0
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return _quantize(OVERLAY_IMAGE_WEIGHT * img + OVERLAY_MAP_WEIGHT * colormap(values))


def image_grid(images, ncols: int | None = None, pad: int = 1, pad_value: float = -1.0) -> np.ndarray:
    """Tile ``(N, C, H, W)`` images into one ``(C, H', W')`` image."""
    X = check_images(images)
    n, c, h, w = X.shape
    ncols = ncols or int(np.ceil(np.sqrt(n)))
    nrows = int(np.ceil(n / ncols))
    grid = np.full((c, nrows * (h + pad) + pad, ncols * (w + pad) + pad), pad_value, dtype=np.float32)
    for i, img in enumerate(X):
        r, col = divmod(i, ncols)
        y, x = pad + r * (h + pad), pad + col * (w + pad)
        grid[:, y : y + h, x : x + w] = img
    return grid


def grid_cells(values, grid: int = 3, top_k: int = 3) -> list:
    """Rank the cells of a ``grid x grid`` partition by mean map value.

    Returns ``[(row, col, score), ...]`` for the ``top_k`` highest cells; ties
    resolve in row-major order.
    """
    m = np.asarray(values, dtype=np.float64)
    h, w = m.shape
    if grid < 1 or grid > min(h, w):
        raise ValueError(f"grid {grid} does not fit a {h}x{w} map")
    ys = np.linspace(0, h, grid + 1).round().astype(int)
    xs = np.linspace(0, w, grid + 1).round().astype(int)
    cells = []
    for r in range(grid):
        for c in range(grid):
            cells.append((r, c, float(m[ys[r] : ys[r + 1], xs[c] : xs[c + 1]].mean())))
    order = sorted(range(len(cells)), key=lambda i: (-cells[i][2], i))
    return [cells[i] for i in order[: max(0, int(top_k))]]


__all__ = ["colormap", "heatmap", "overlay", "image_grid", "grid_cells"]
