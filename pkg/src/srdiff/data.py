"""Synthetic datasets and binary PGM/PPM ingestion.

Images are ``(N, C, H, W)`` float32 arrays in [-1, 1]; 8-bit pixel value ``v``
maps to ``v / 127.5 - 1``.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path

import numpy as np

from ._validation import check_images

logger = logging.getLogger(__name__)

SUPPORTED_RESOLUTIONS = (16, 32)
_SUPERSAMPLE = 4


def to_uint8(images) -> np.ndarray:
    x = np.clip((np.asarray(images, dtype=np.float64) + 1.0) * 127.5, 0, 255)
    return np.round(x).astype(np.uint8)


def from_uint8(pixels) -> np.ndarray:
    return (np.asarray(pixels, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _smooth_noise(rng, size, cells):
    coarse = rng.standard_normal((cells, cells))
    idx = np.linspace(0, cells - 1, size)
    i0 = np.floor(idx).astype(int)
    i1 = np.minimum(i0 + 1, cells - 1)
    f = idx - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i1] * f[:, None]
    return rows[:, i0] * (1 - f)[None] + rows[:, i1] * f[None]


def _draw_face(rng, res):
    s = res * _SUPERSAMPLE
    yy, xx = np.meshgrid((np.arange(s) + 0.5) / s, (np.arange(s) + 0.5) / s, indexing="ij")

    background = rng.uniform(0.35, 0.5)
    img = np.full((s, s), background)
    img += 0.03 * _smooth_noise(rng, s, 4)

    cy, cx = rng.uniform(0.46, 0.54), rng.uniform(0.44, 0.56)
    rx = rng.uniform(0.28, 0.35)
    ry = min(rx * rng.uniform(1.1, 1.3), 0.44)
    head = _ellipse(yy, xx, cy, cx, ry, rx)
    img[head] = rng.uniform(0.7, 0.92)

    eye_r = 0.085
    eye_y = cy - ry * rng.uniform(0.3, 0.4)
    eye_dx = rx * rng.uniform(0.4, 0.5)
    eye_val = rng.uniform(0.0, 0.1)
    for side in (-1.0, 1.0):
        img[_ellipse(yy, xx, eye_y, cx + side * eye_dx, eye_r, eye_r)] = eye_val

    mouth_y = cy + ry * rng.uniform(0.45, 0.6)
    mouth = _ellipse(yy, xx, mouth_y, cx, 0.045, rx * rng.uniform(0.35, 0.55))
    img[mouth] = rng.uniform(0.1, 0.3)

    img = img.reshape(res, _SUPERSAMPLE, res, _SUPERSAMPLE).mean(axis=(1, 3))
    img += 0.01 * rng.standard_normal((res, res))
    return np.clip(img, 0.0, 1.0) * 2.0 - 1.0


def gen_toy_faces(n: int, resolution: int = 16, seed: int = 0) -> np.ndarray:
    """Procedural grayscale faces: ellipse head, two dark eyes, a mouth, textured background."""
    if resolution not in SUPPORTED_RESOLUTIONS:
        raise ValueError(f"resolution must be one of {SUPPORTED_RESOLUTIONS}, got {resolution}")
    if int(n) < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    faces = np.stack([_draw_face(rng, resolution) for _ in range(int(n))])
    return faces[:, None].astype(np.float32)


def make_quadrant_dataset(n: int, size: int = 16, quadrant: int = 0, patch: int = 4, seed: int = 0):
    """Real textures vs. fakes carrying a bright square inside one quadrant.

    Returns ``(X, y)`` with ``n`` real (label 0) then ``n`` fake (label 1) images.
    Quadrants are numbered row-major: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    """
    if quadrant not in (0, 1, 2, 3):
        raise ValueError("quadrant must be 0..3")
    half = size // 2
    if patch > half:
        raise ValueError("patch does not fit in a quadrant")
    rng = np.random.default_rng(seed)

    def texture():
        return np.clip(0.35 * _smooth_noise(rng, size, 5) + 0.05 * rng.standard_normal((size, size)), -1, 1)

    real = np.stack([texture() for _ in range(n)])
    fake = np.stack([texture() for _ in range(n)])
    qy, qx = divmod(quadrant, 2)
    for img in fake:
        y = qy * half + rng.integers(0, half - patch + 1)
        x = qx * half + rng.integers(0, half - patch + 1)
        img[y : y + patch, x : x + patch] = np.clip(img[y : y + patch, x : x + patch] + 1.0, -1, 1)
    X = np.concatenate([real, fake])[:, None].astype(np.float32)
    y = np.concatenate([np.zeros(n, dtype=int), np.ones(n, dtype=int)])
    return X, y


# --- binary PNM -------------------------------------------------------------------------


def _read_header(buf: bytes):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise ValueError("truncated PNM header")
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte precedes the raster


def read_pnm(path) -> np.ndarray:
    """Read a binary P5/P6 file (maxval 255) into a ``(C, H, W)`` uint8 array."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _read_header(buf)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported magic {magic!r} (need P5 or P6)")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: maxval must be 255, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    raster = np.frombuffer(buf, dtype=np.uint8, count=need, offset=offset) if len(buf) - offset >= need else None
    if raster is None:
        raise ValueError(f"{path}: raster truncated ({len(buf) - offset} of {need} bytes)")
    return raster.reshape(h, w, channels).transpose(2, 0, 1).copy()


def write_pnm(path, pixels) -> Path:
    """Write a ``(C, H, W)`` or ``(H, W)`` uint8 array as P5 (C=1) or P6 (C=3)."""
    px = np.asarray(pixels)
    if px.dtype != np.uint8:
        raise TypeError("write_pnm expects uint8 pixels; use to_uint8 first")
    if px.ndim == 2:
        px = px[None]
    c, h, w = px.shape
    if c not in (1, 3):
        raise ValueError(f"PNM supports 1 or 3 channels, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(px.transpose(1, 2, 0)).tobytes())
    return path


def write_image(path, image) -> Path:
    """Write one ``(C, H, W)`` image in [-1, 1]."""
    return write_pnm(path, to_uint8(image))


def _area_matrix(n_in, n_out):
    """Row-stochastic matrix averaging the input interval covered by each output pixel."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        a, b = i * scale, (i + 1) * scale
        for j in range(int(np.floor(a)), int(np.ceil(b))):
            m[i, j] = min(b, j + 1) - max(a, j)
    return m / m.sum(axis=1, keepdims=True)


def resize_area(image: np.ndarray, h: int, w: int) -> np.ndarray:
    """Area-average resize of a ``(C, H, W)`` float image."""
    c, H, W = image.shape
    if (H, W) == (h, w):
        return image.astype(np.float64)
    rh, rw = _area_matrix(H, h), _area_matrix(W, w)
    return np.einsum("ih,chw,jw->cij", rh, image.astype(np.float64), rw)


def load_folder(path, resolution: int) -> np.ndarray:
    """Load every ``.pgm``/``.ppm`` in ``path`` (lexicographic order) as ``(N, C, R, R)``.

    Unreadable files and channel-count mismatches are logged and skipped; an
    empty result raises ``ValueError`` listing the per-file problems.
    """
    root = Path(path)
    if not root.is_dir():
        raise ValueError(f"{root} is not a directory")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in (".pgm", ".ppm", ".pnm"))
    images, problems, channels = [], [], None
    for f in files:
        try:
            px = read_pnm(f)
        except (OSError, ValueError) as exc:
            problems.append(f"{f.name}: {exc}")
            continue
        if channels is None:
            channels = px.shape[0]
        elif px.shape[0] != channels:
            problems.append(f"{f.name}: {px.shape[0]} channels, expected {channels}")
            continue
        img = px.astype(np.float64)
        if img.shape[1:] != (resolution, resolution):
            img = resize_area(img, resolution, resolution)
        images.append(img / 127.5 - 1.0)
    for p in problems:
        logger.warning("skipped %s", p)
    if not images:
        detail = "; ".join(problems) if problems else "no .pgm/.ppm files"
        raise ValueError(f"no images loaded from {root}: {detail}")
    return np.stack(images).astype(np.float32)


def save_folder(path, images, prefix="img") -> list:
    """Write a batch as numbered PNM files; returns the written paths."""
    X = check_images(images)
    os.makedirs(path, exist_ok=True)
    width = max(4, len(str(len(X))))
    return [write_image(Path(path) / f"{prefix}_{i:0{width}d}.{'pgm' if x.shape[0] == 1 else 'ppm'}", x)
            for i, x in enumerate(X)]


__all__ = [
    "gen_toy_faces",
    "make_quadrant_dataset",
    "read_pnm",
    "write_pnm",
    "write_image",
    "to_uint8",
    "from_uint8",
    "resize_area",
    "load_folder",
    "save_folder",
]
