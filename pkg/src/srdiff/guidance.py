"""Static and structural guidance maps that can stand in for the flaw activation map.

All maps are ``(H, W)`` float arrays in [0, 1] and are accepted wherever a mean
FAM is (``sr_noise``, ``embed_mfam``, the trainer).
"""

from __future__ import annotations

import math

import numpy as np

from ._validation import check_images

LUMA = np.array([0.299, 0.587, 0.114])

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


def _check_size(h, w):
    if int(h) < 2 or int(w) < 2:
        raise ValueError(f"guidance maps need h, w >= 2, got {h}x{w}")
    return int(h), int(w)


def center_gaussian_map(h: int, w: int, sigma_frac: float = 0.25) -> np.ndarray:
    """Isotropic Gaussian bump, 1 at the centre pixel(s) and 0 at the corners."""
    h, w = _check_size(h, w)
    if not sigma_frac > 0:
        raise ValueError(f"sigma_frac must be positive, got {sigma_frac}")
    sigma = sigma_frac * min(h, w)
    yy, xx = np.meshgrid(np.arange(h) - (h - 1) / 2.0, np.arange(w) - (w - 1) / 2.0, indexing="ij")
    g = np.exp(-(yy**2 + xx**2) / (2.0 * sigma**2))
    lo, hi = g.min(), g.max()
    if hi - lo <= 0:
        raise ValueError(f"{h}x{w} map is flat (all pixels equidistant from the centre, or sigma_frac too large)")
    return (g - lo) / (hi - lo)


def inverted_gaussian_map(h: int, w: int, sigma_frac: float = 0.25) -> np.ndarray:
    """Complement of :func:`center_gaussian_map`: 0 at the centre, 1 at the corners."""
    return 1.0 - center_gaussian_map(h, w, sigma_frac)


def to_gray(image) -> np.ndarray:
    """``(C, H, W)`` or ``(H, W)`` image -> ``(H, W)`` luminance, values unchanged in scale."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim != 3:
        raise ValueError(f"expected (C, H, W) or (H, W), got shape {img.shape}")
    if img.shape[0] == 1:
        return img[0]
    if img.shape[0] == 3:
        return np.tensordot(LUMA, img, axes=1)
    raise ValueError(f"cannot convert {img.shape[0]}-channel image to grayscale")


def _gaussian_kernel(sigma):
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _correlate_rows(img, kernel, mode):
    r = len(kernel) // 2
    padded = np.pad(img, ((0, 0), (r, r)), mode=mode)
    out = np.zeros_like(img)
    for i, kv in enumerate(kernel):
        out += kv * padded[:, i : i + img.shape[1]]
    return out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img.copy()
    k = _gaussian_kernel(sigma)
    out = _correlate_rows(img, k, "reflect")
    return _correlate_rows(out.T, k, "reflect").T


def _correlate3(img, kernel):
    padded = np.pad(img, 1, mode="edge")
    h, w = img.shape
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            if kernel[dy, dx]:
                out += kernel[dy, dx] * padded[dy : dy + h, dx : dx + w]
    return out


def sobel(img: np.ndarray):
    gx = _correlate3(img, SOBEL_X)
    gy = _correlate3(img, SOBEL_Y)
    return gx, gy


def non_max_suppression(mag, gx, gy):
    """Keep pixels that are local maxima along the quantised gradient direction."""
    h, w = mag.shape
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    # neighbour offsets (dy, dx) for 0, 45, 90, 135 degree bins
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    bins = np.floor((angle + 22.5) / 45.0).astype(int) % 4
    padded = np.pad(mag, 1, mode="constant")
    keep = np.zeros_like(mag, dtype=bool)
    for b, (dy, dx) in offsets.items():
        ahead = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        behind = padded[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        # strict on one side so a symmetric ridge keeps a single pixel
        keep |= (bins == b) & (mag >= ahead) & (mag > behind)
    return np.where(keep, mag, 0.0)


def hysteresis(mag, low, high):
    """Strong pixels (>= high) plus weak pixels (>= low) 8-connected to them."""
    weak = mag >= low
    edges = mag >= high
    h, w = mag.shape
    while True:
        p = np.pad(edges, 1)
        grown = np.zeros_like(edges)
        for dy in range(3):
            for dx in range(3):
                grown |= p[dy : dy + h, dx : dx + w]
        grown &= weak
        if np.array_equal(grown, edges):
            return edges
        edges = grown


def edge_map(image, low: float = 0.3, high: float = 0.6, blur_sigma: float = 1.0) -> np.ndarray:
    """Binary Canny-style edge map of one image.

    The image is taken in model range [-1, 1] and mapped to [0, 1] intensity;
    thresholds apply to the Sobel gradient magnitude of the smoothed intensity.
    """
    if not 0 <= low < high:
        raise ValueError(f"need 0 <= low < high, got low={low}, high={high}")
    gray = (to_gray(image) + 1.0) / 2.0
    smooth = gaussian_blur(gray, blur_sigma)
    gx, gy = sobel(smooth)
    mag = np.hypot(gx, gy)
    thin = non_max_suppression(mag, gx, gy)
    return hysteresis(thin, low, high).astype(np.float64)


def edge_guidance(images, low: float = 0.3, high: float = 0.6, blur_sigma: float = 1.0) -> np.ndarray:
    """Per-image edge maps averaged over the batch."""
    X = check_images(images, dtype=np.float64)
    return np.mean([edge_map(x, low, high, blur_sigma) for x in X], axis=0)


GUIDANCE_KINDS = ("fam", "center-gaussian", "inverted-gaussian", "edge")


__all__ = [
    "GUIDANCE_KINDS",
    "center_gaussian_map",
    "inverted_gaussian_map",
    "edge_map",
    "edge_guidance",
    "gaussian_blur",
    "sobel",
    "non_max_suppression",
    "hysteresis",
    "to_gray",
]
