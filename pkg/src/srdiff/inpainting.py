"""RePaint-style inpainting with an unconditionally trained denoiser.

Masks use 1 for known pixels and 0 for pixels to fill. At every reverse step the
known region is replaced by a fresh forward-noised copy of the ground truth at
the same noise level; resampling jumps push the composite back up ``jump_len``
levels with the one-step forward transition and denoise again.
"""

from __future__ import annotations

from enum import Enum

import numpy as np
import torch

from ._validation import as_generator, check_images
from .diffusion import NoiseSchedule, forward_sample, reverse_step


class MaskKind(str, Enum):
    WIDE = "wide"
    NARROW = "narrow"
    ALTERNATING = "alternating"


# unknown-pixel fraction bands per stroke family
COVERAGE = {MaskKind.WIDE: (0.30, 0.50), MaskKind.NARROW: (0.05, 0.15)}
_STROKE_WIDTH = {MaskKind.WIDE: (0.15, 0.25), MaskKind.NARROW: (0.03, 0.07)}


def _stamp_segment(unknown, y0, x0, y1, x1, radius):
    h, w = unknown.shape
    yy, xx = np.mgrid[0:h, 0:w]
    py, px = yy + 0.5, xx + 0.5
    dy, dx = y1 - y0, x1 - x0
    seg = dy * dy + dx * dx
    if seg == 0:
        u = np.zeros_like(py)
    else:
        u = np.clip(((py - y0) * dy + (px - x0) * dx) / seg, 0.0, 1.0)
    dist2 = (py - (y0 + u * dy)) ** 2 + (px - (x0 + u * dx)) ** 2
    unknown |= dist2 <= radius * radius


def _stroke_mask(kind, h, w, rng):
    lo, hi = COVERAGE[kind]
    wlo, whi = _STROKE_WIDTH[kind]
    size = min(h, w)
    for _ in range(100):
        target = rng.uniform(lo, hi)
        unknown = np.zeros((h, w), dtype=bool)
        for _ in range(200):
            if unknown.mean() >= target:
                break
            y, x = rng.uniform(0, h), rng.uniform(0, w)
            radius = max(0.5, rng.uniform(wlo, whi) * size / 2.0)
            for _ in range(int(rng.integers(1, 4))):
                angle = rng.uniform(0, 2 * np.pi)
                length = rng.uniform(0.2, 0.6) * size
                ny = float(np.clip(y + length * np.sin(angle), 0, h))
                nx = float(np.clip(x + length * np.cos(angle), 0, w))
                trial = unknown.copy()
                _stamp_segment(trial, y, x, ny, nx, radius)
                if trial.mean() > hi:
                    break
                unknown, y, x = trial, ny, nx
        if lo <= unknown.mean() <= hi:
            return unknown
    raise RuntimeError(f"could not draw a {kind.value} mask within coverage {lo:.2f}-{hi:.2f} for {h}x{w}")


def make_mask(kind, h: int, w: int, rng=None) -> np.ndarray:
    """Binary mask (1 = known). Stroke families are redrawn until their unknown
    fraction lands in the family's coverage band; alternating lines hide every
    odd row."""
    kind = MaskKind(kind)
    if kind is MaskKind.ALTERNATING:
        if int(h) < 2 or int(w) < 1:
            raise ValueError(f"alternating-line masks need h >= 2, got {h}x{w}")
        mask = np.ones((h, w), dtype=np.float32)
        mask[1::2] = 0.0
        return mask
    if int(h) < 8 or int(w) < 8:
        raise ValueError(f"stroke masks need h, w >= 8, got {h}x{w}")
    rng = np.random.default_rng(rng)
    return (~_stroke_mask(kind, int(h), int(w), rng)).astype(np.float32)


def repaint_schedule(T: int, jump_len: int = 10, jump_n: int = 2) -> list:
    """Sequence of noise levels visited; level ``T`` is pure noise, level 0 the output.

    Consecutive entries differ by one: a decrease is a reverse (denoising) step,
    an increase a forward re-noising step. With ``jump_n = 0`` the sequence is
    ``T, T-1, ..., 0``.
    """
    if jump_len < 1 or jump_n < 0:
        raise ValueError("need jump_len >= 1 and jump_n >= 0")
    jumps = {j: jump_n for j in range(jump_len, T, jump_len)}
    level, levels = T, [T]
    while level > 0:
        level -= 1
        levels.append(level)
        if jumps.get(level, 0) > 0 and level + jump_len <= T:
            jumps[level] -= 1
            for _ in range(jump_len):
                level += 1
                levels.append(level)
    return levels


@torch.no_grad()
def repaint_sample(model, sched: NoiseSchedule, known, mask, jump_len: int = 10, jump_n: int = 2,
                   rng=None, return_info: bool = False):
    """Fill the unknown region of ``known`` (``(B, C, H, W)`` in [-1, 1]).

    Known pixels of the result equal ``known`` exactly.
    """
    x0 = torch.from_numpy(check_images(known, name="known")) if not isinstance(known, torch.Tensor) else known
    m = torch.as_tensor(np.asarray(mask))
    if m.ndim != 2 or tuple(m.shape) != tuple(x0.shape[-2:]):
        raise ValueError(f"mask shape {tuple(m.shape)} does not match image size {tuple(x0.shape[-2:])}")
    if not torch.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary")
    keep = (m == 1).expand_as(x0)
    gen = as_generator(rng)
    T = sched.T

    levels = repaint_schedule(T, jump_len, jump_n)
    x = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    n_reverse = n_forward = 0
    was_training = getattr(model, "training", False)
    if was_training:
        model.eval()
    try:
        for cur, nxt in zip(levels[:-1], levels[1:]):
            if nxt < cur:
                unknown_part = reverse_step(model, x, cur - 1, sched, gen)
                if nxt == 0:
                    known_part = x0
                else:
                    known_part = forward_sample(x0, nxt - 1, torch.randn(x0.shape, generator=gen, dtype=x0.dtype), sched)
                x = torch.where(keep, known_part, unknown_part)
                n_reverse += 1
            else:
                beta = sched.coef("beta", cur, x)
                z = torch.randn(x.shape, generator=gen, dtype=x.dtype)
                x = torch.sqrt(1.0 - beta) * x + torch.sqrt(beta) * z
                n_forward += 1
    finally:
        if was_training:
            model.train()
    if return_info:
        return x, {"reverse_steps": n_reverse, "forward_steps": n_forward}
    return x


__all__ = ["MaskKind", "COVERAGE", "make_mask", "repaint_schedule", "repaint_sample"]
