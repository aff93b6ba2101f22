"""Small U-Net noise predictor whose self-attention accepts guidance-map modulation.

Inside every attention block the key and value rows of token ``i`` are scaled by
``1 + lambda_rev * m[i]``, where ``m`` is the guidance map mean-pooled to the
block's spatial grid and flattened row-major. With ``lambda_rev = 0`` (or no map)
the block is ordinary scaled dot-product attention.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ._validation import check_nonneg
from .diffusion import DivergenceError


def timestep_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal features ``[sin(t * f_k), cos(t * f_k)]`` with geometric ``f_k``.

    Accepts a scalar or a 1-D tensor of timesteps; returns ``(dim,)`` or ``(B, dim)``.
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    scalar = not (isinstance(t, torch.Tensor) and t.ndim > 0)
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    return emb[0] if scalar else emb


def embed_mfam(mfam, target_h: int, target_w: int) -> torch.Tensor:
    """Mean-pool a ``(H, W)`` map to ``target_h x target_w`` and flatten row-major."""
    m = torch.as_tensor(mfam)
    if not m.is_floating_point():
        m = m.to(torch.float32)
    if m.ndim != 2:
        raise ValueError(f"guidance map must be 2-D, got shape {tuple(m.shape)}")
    h, w = m.shape
    if target_h < 1 or target_w < 1 or target_h > h or target_w > w:
        raise ValueError(f"cannot pool a {h}x{w} map to {target_h}x{target_w}")
    if (target_h, target_w) == (h, w):
        return m.reshape(-1).clone()
    pooled = F.adaptive_avg_pool2d(m[None, None], (target_h, target_w))
    return pooled.reshape(-1)


def modulated_attention(q, k, v, m_emb=None, lambda_rev: float = 0.0, return_weights=False):
    """Scaled dot-product attention with key/value rows scaled by ``1 + lambda_rev * m_emb``.

    ``q, k, v`` have shape ``(..., N, d)``; ``m_emb`` has shape ``(N,)`` (shared)
    or ``(B, N)`` broadcast over any head axis.
    """
    lam = check_nonneg(lambda_rev, "lambda_rev")
    if q.shape[-2] != k.shape[-2] or k.shape[-2] != v.shape[-2]:
        raise ValueError("q, k and v must have the same token count")
    if m_emb is not None:
        m = torch.as_tensor(m_emb, dtype=k.dtype)
        n_tokens = k.shape[-2]
        if m.shape[-1] != n_tokens:
            raise ValueError(f"modulation length {m.shape[-1]} does not match token count {n_tokens}")
        if lam != 0.0:
            scale = 1.0 + lam * m
            if scale.ndim == 2 and k.ndim == 4:
                scale = scale[:, None]
            scale = scale[..., None]
            k = k * scale
            v = v * scale
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    weights = torch.softmax(logits, dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


def _groups(ch: int) -> int:
    # at least 4 channels per group: with singleton groups the norm would erase
    # the per-channel time-embedding shift that follows conv1
    g = max(1, min(8, ch // 4))
    while ch % g:
        g -= 1
    return g


@dataclass
class DenoiserConfig:
    in_channels: int = 1
    image_size: int = 16
    base_channels: int = 16
    channel_multipliers: tuple = (1, 2)
    attention_resolutions: tuple = (8,)
    time_embed_dim: int = 32
    num_heads: int = 1

    def __post_init__(self):
        self.channel_multipliers = tuple(int(c) for c in self.channel_multipliers)
        self.attention_resolutions = tuple(sorted({int(r) for r in self.attention_resolutions}))
        dims = (self.in_channels, self.image_size, self.base_channels, self.time_embed_dim, self.num_heads)
        if min(dims) < 1 or not self.channel_multipliers or min(self.channel_multipliers) < 1:
            raise ValueError("all denoiser dimensions must be positive")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if not self.attention_resolutions:
            raise ValueError("at least one attention resolution is required")
        levels = self.resolutions()
        missing = set(self.attention_resolutions) - set(levels)
        if missing:
            raise ValueError(
                f"attention resolutions {sorted(missing)} are not reached; available: {levels}"
            )
        for mult in self.channel_multipliers:
            if (self.base_channels * mult) % self.num_heads:
                raise ValueError("channel counts must be divisible by num_heads")

    def resolutions(self) -> list:
        res, out = self.image_size, []
        for i in range(len(self.channel_multipliers)):
            out.append(res)
            if i < len(self.channel_multipliers) - 1:
                if res % 2:
                    raise ValueError(f"image_size {self.image_size} cannot be halved {i + 1} times")
                res //= 2
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_resolutions"] = list(self.attention_resolutions)
        return d


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, temb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    """Self-attention over the ``H*W`` spatial tokens with optional K/V modulation."""

    def __init__(self, ch, num_heads=1):
        super().__init__()
        self.num_heads = num_heads
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x, m_emb=None, lambda_rev=0.0):
        b, c, h, w = x.shape
        heads = self.num_heads
        qkv = self.qkv(self.norm(x)).reshape(b, 3, heads, c // heads, h * w)
        q, k, v = (qkv[:, i].transpose(-2, -1) for i in range(3))  # (B, heads, N, d)
        out = modulated_attention(q, k, v, m_emb, lambda_rev)
        out = out.transpose(-2, -1).reshape(b, c, h, w)
        return x + self.proj(out)


class UNetDenoiser(nn.Module):
    """Noise-prediction network ``eps_theta(x_t, t)``.

    ``forward(x, t, mfam=None, lambda_rev=0.0)``: when a ``(H, W)`` guidance map
    is given, each attention block receives it mean-pooled to its own resolution.
    """

    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        cfg = config or DenoiserConfig()
        self.config = cfg
        temb = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(temb, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(cfg.in_channels, cfg.base_channels, 3, padding=1)

        resolutions = cfg.resolutions()
        attn_at = set(cfg.attention_resolutions)
        ch = cfg.base_channels
        skip_chs = []
        self.down = nn.ModuleList()
        for i, mult in enumerate(cfg.channel_multipliers):
            out_ch = cfg.base_channels * mult
            level = nn.ModuleDict({"res": ResBlock(ch, out_ch, temb)})
            if resolutions[i] in attn_at:
                level["attn"] = AttentionBlock(out_ch, cfg.num_heads)
            if i < len(cfg.channel_multipliers) - 1:
                level["downsample"] = nn.Conv2d(out_ch, out_ch, 3, stride=2, padding=1)
            self.down.append(level)
            skip_chs.append(out_ch)
            ch = out_ch

        self.mid = ResBlock(ch, ch, temb)

        self.up = nn.ModuleList()
        for i in reversed(range(len(cfg.channel_multipliers))):
            out_ch = cfg.base_channels * cfg.channel_multipliers[i]
            level = nn.ModuleDict({"res": ResBlock(ch + skip_chs[i], out_ch, temb)})
            if resolutions[i] in attn_at:
                level["attn"] = AttentionBlock(out_ch, cfg.num_heads)
            if i > 0:
                level["upsample"] = nn.Conv2d(out_ch, out_ch, 3, padding=1)
            self.up.append(level)
            ch = out_ch

        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, cfg.in_channels, 3, padding=1)

    def _attend(self, block, h, mfam, lambda_rev):
        m_emb = None
        if mfam is not None and lambda_rev:
            m_emb = embed_mfam(mfam, h.shape[-2], h.shape[-1]).to(h.dtype)
        return block(h, m_emb, lambda_rev)

    def forward(self, x, t, mfam=None, lambda_rev=0.0):
        if mfam is not None:
            mfam = torch.as_tensor(mfam, dtype=x.dtype)
            if tuple(mfam.shape) != tuple(x.shape[-2:]):
                raise ValueError(
                    f"guidance map size {tuple(mfam.shape)} does not match image size {tuple(x.shape[-2:])}"
                )
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and x.shape[0] > 1:
            t = t.expand(x.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.config.time_embed_dim).to(x.dtype))

        h = self.conv_in(x)
        skips = []
        for level in self.down:
            h = level["res"](h, temb)
            if "attn" in level:
                h = self._attend(level["attn"], h, mfam, lambda_rev)
            skips.append(h)
            if "downsample" in level:
                h = level["downsample"](h)
        h = self.mid(h, temb)
        for level in self.up:
            h = level["res"](torch.cat([h, skips.pop()], dim=1), temb)
            if "attn" in level:
                h = self._attend(level["attn"], h, mfam, lambda_rev)
            if "upsample" in level:
                h = level["upsample"](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))

    def attention_blocks(self):
        return [m for m in self.modules() if isinstance(m, AttentionBlock)]


def predict_noise(model, x_t, t, mfam=None, lambda_rev: float = 0.0) -> torch.Tensor:
    """Evaluate ``eps_theta(x_t, t)`` with optional guidance-map attention modulation."""
    cfg = getattr(model, "config", None)
    if cfg is not None:
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x_t.ndim != 4 or tuple(x_t.shape[1:]) != expected:
            raise ValueError(f"x_t shape {tuple(x_t.shape)} does not match model input (B, {expected})")
    out = model(x_t, t, mfam=mfam, lambda_rev=lambda_rev)
    if not torch.all(torch.isfinite(out)):
        raise DivergenceError(f"non-finite noise prediction (max|x_t|={x_t.abs().max().item():.3g})")
    return out


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
