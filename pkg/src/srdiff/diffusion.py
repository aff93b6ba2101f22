"""Noise schedule, forward noising, self-refining noise and ancestral sampling.

Forward process in closed form::

    x_t = sqrt(alpha_bar[t]) * x_0 + sqrt(1 - alpha_bar[t]) * eps

Self-refining variant: the Gaussian noise is shifted by a weighted guidance map
before it is injected, and the shifted noise is also the regression target::

    eps_sr  = eps + lambda_fwd * M
    x~_t    = sqrt(alpha_bar[t]) * x_0 + sqrt(1 - alpha_bar[t]) * eps_sr
    loss    = mean || eps_sr - eps_theta(x~_t, t) ||^2

Timesteps are 0-based internally: index ``t`` in ``[0, T)`` is step ``t + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from ._validation import as_generator, check_nonneg, check_positive_int


class DivergenceError(FloatingPointError):
    """Raised when a training loss or model activation becomes non-finite."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep coefficients. All arrays are float64 tensors of length ``T``."""

    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor

    def __post_init__(self):
        beta = self.beta
        if beta.ndim != 1 or beta.numel() < 1:
            raise ValueError("beta must be a non-empty 1-D tensor")
        if not torch.all((beta > 0) & (beta < 1)):
            raise ValueError("beta values must lie strictly inside (0, 1)")
        if self.alpha.shape != beta.shape or self.alpha_bar.shape != beta.shape:
            raise ValueError("alpha and alpha_bar must match beta's shape")

    @property
    def T(self) -> int:
        return int(self.beta.numel())

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        beta = torch.as_tensor(betas, dtype=torch.float64).flatten().clone()
        alpha = 1.0 - beta
        alpha_bar = torch.cumprod(alpha, dim=0)
        return cls(beta=beta, alpha=alpha, alpha_bar=alpha_bar)

    def coef(self, name: str, t, like: torch.Tensor) -> torch.Tensor:
        """Gather ``name`` at timestep(s) ``t`` shaped to broadcast against ``like``."""
        values = getattr(self, name)
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            out = values[t.long()].to(like.dtype)
            return out.reshape(-1, *([1] * (like.ndim - 1)))
        return values[int(t)].to(like.dtype)


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` to ``beta_end`` inclusive."""
    T = check_positive_int(T, "T")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    if T == 1:
        betas = torch.tensor([beta_start], dtype=torch.float64)
    else:
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    return NoiseSchedule.from_betas(betas)


def _check_t(t, sched: NoiseSchedule):
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= sched.T):
            raise IndexError(f"timestep out of range [0, {sched.T})")
        return
    if not 0 <= int(t) < sched.T:
        raise IndexError(f"timestep {int(t)} out of range [0, {sched.T})")


def forward_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Draw ``x_t`` from ``q(x_t | x_0)`` using the supplied noise ``eps``.

    ``t`` may be a scalar index or a per-sample LongTensor of length ``B``.
    """
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} does not match eps shape {tuple(eps.shape)}")
    _check_t(t, sched)
    a = sched.coef("alpha_bar", t, x0)
    return torch.sqrt(a) * x0 + torch.sqrt(1.0 - a) * eps


def _map_tensor(mfam, like: torch.Tensor) -> torch.Tensor:
    m = torch.as_tensor(mfam, dtype=like.dtype, device=like.device)
    if m.ndim != 2:
        raise ValueError(f"guidance map must be 2-D (H, W), got shape {tuple(m.shape)}")
    if tuple(m.shape) != tuple(like.shape[-2:]):
        raise ValueError(
            f"guidance map size {tuple(m.shape)} does not match spatial size {tuple(like.shape[-2:])}"
        )
    return m


def sr_noise(eps: torch.Tensor, mfam, lambda_fwd: float) -> torch.Tensor:
    """Shift Gaussian noise toward flawed regions: ``eps + lambda_fwd * mfam``.

    The map broadcasts over batch and channel axes. ``lambda_fwd == 0`` returns
    ``eps`` itself.
    """
    lam = check_nonneg(lambda_fwd, "lambda_fwd")
    if mfam is None:
        return eps
    m = _map_tensor(mfam, eps)
    if lam == 0.0:
        return eps
    return eps + lam * m


def sr_forward_sample(x0, t, eps, mfam, lambda_fwd, sched):
    return forward_sample(x0, t, sr_noise(eps, mfam, lambda_fwd), sched)


def sr_loss(model, x0, t, eps, mfam, lambda_fwd, lambda_rev, sched) -> torch.Tensor:
    """Mean squared error between the self-refining noise and the model's prediction.

    With ``mfam=None`` or both lambdas zero this is the plain DDPM objective.
    """
    target = sr_noise(eps, mfam, lambda_fwd)
    x_t = forward_sample(x0, t, target, sched)
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        t_batch = t.long()
    else:
        t_batch = torch.full((x0.shape[0],), int(t), dtype=torch.long)
    pred = model(x_t, t_batch, mfam=mfam, lambda_rev=lambda_rev)
    loss = torch.mean((target - pred) ** 2)
    if not torch.isfinite(loss):
        raise DivergenceError(
            f"non-finite loss {loss.item()} (lambda_fwd={lambda_fwd}, lambda_rev={lambda_rev}, "
            f"max|x_t|={x_t.abs().max().item():.3g}, max|pred|={pred.abs().max().item():.3g})"
        )
    return loss


@torch.no_grad()
def reverse_step(model, x_t: torch.Tensor, t: int, sched: NoiseSchedule, rng=None, z=None) -> torch.Tensor:
    """One ancestral step ``x_t -> x_{t-1}`` with variance ``beta[t]``.

    No noise is added at ``t == 0``. ``z`` overrides the Gaussian draw.
    """
    _check_t(t, sched)
    t = int(t)
    t_batch = torch.full((x_t.shape[0],), t, dtype=torch.long)
    eps_hat = model(x_t, t_batch)
    beta = sched.coef("beta", t, x_t)
    alpha = sched.coef("alpha", t, x_t)
    alpha_bar = sched.coef("alpha_bar", t, x_t)
    mean = (x_t - (beta / torch.sqrt(1.0 - alpha_bar)) * eps_hat) / torch.sqrt(alpha)
    if t == 0:
        return mean
    if z is None:
        z = torch.randn(x_t.shape, generator=as_generator(rng), dtype=x_t.dtype)
    return mean + torch.sqrt(beta) * z


@torch.no_grad()
def sample(model, sched: NoiseSchedule, shape, rng=None, count: int = 1, steps=None) -> torch.Tensor:
    """Generate ``count`` images of ``shape`` ``(C, H, W)`` by ancestral sampling.

    Sampling never consumes a guidance map. ``steps`` truncates the chain to
    start at ``t = steps - 1`` (default: the full ``T`` steps).
    """
    count = check_positive_int(count, "count")
    gen = as_generator(rng)
    start = sched.T if steps is None else min(check_positive_int(steps, "steps"), sched.T)
    was_training = getattr(model, "training", False)
    if was_training:
        model.eval()
    try:
        first = next(iter(model.parameters()), None) if hasattr(model, "parameters") else None
        dtype = first.dtype if first is not None else torch.float32
        x = torch.randn((count, *shape), generator=gen, dtype=dtype)
        for t in range(start - 1, -1, -1):
            x = reverse_step(model, x, t, sched, gen)
    finally:
        if was_training:
            model.train()
    if not torch.all(torch.isfinite(x)):
        raise DivergenceError("sampling produced non-finite values")
    return x


def sample_timesteps(batch: int, T: int, rng) -> torch.Tensor:
    """Uniform draw from ``{1, ..., T}`` returned as 0-based indices."""
    return torch.randint(1, T + 1, (batch,), generator=rng) - 1


__all__ = [
    "DivergenceError",
    "NoiseSchedule",
    "make_linear_schedule",
    "forward_sample",
    "sr_noise",
    "sr_forward_sample",
    "sr_loss",
    "reverse_step",
    "sample",
    "sample_timesteps",
]
