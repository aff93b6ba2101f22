import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import wasserstein_distance

from srdiff.diffusion import (
    DivergenceError,
    NoiseSchedule,
    forward_sample,
    make_linear_schedule,
    reverse_step,
    sample,
    sample_timesteps,
    sr_forward_sample,
    sr_loss,
    sr_noise,
)
from srdiff.trainer import Trainer

# frozen: product of (1 - beta_i) over a 200-step linear schedule 1e-4 -> 0.02
ALPHA_BAR_199 = 0.13218275425061787
ALPHA_BAR_99 = 0.6024803053077055


class ZeroModel(torch.nn.Module):
    def forward(self, x, t, mfam=None, lambda_rev=0.0):
        return torch.zeros_like(x)


class LinearPixelModel(torch.nn.Module):
    """eps_hat = w * x_t + b, the same for every pixel and timestep."""

    def __init__(self, w, b):
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor(float(w), dtype=torch.float64))
        self.b = torch.nn.Parameter(torch.tensor(float(b), dtype=torch.float64))

    def forward(self, x, t, mfam=None, lambda_rev=0.0):
        return self.w * x + self.b


class TargetModel(torch.nn.Module):
    """Predicts a fixed tensor regardless of input."""

    def __init__(self, out):
        super().__init__()
        self.out = out

    def forward(self, x, t, mfam=None, lambda_rev=0.0):
        return self.out


# -- schedule ---------------------------------------------------------------------------


def test_schedule_single_step():
    s = NoiseSchedule.from_betas([0.1])
    assert s.T == 1
    assert torch.allclose(s.alpha_bar, torch.tensor([0.9], dtype=torch.float64))


def test_schedule_two_steps_by_hand():
    s = NoiseSchedule.from_betas([0.1, 0.2])
    np.testing.assert_allclose(s.alpha_bar.numpy(), [0.9, 0.72], rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.alpha.numpy(), [0.9, 0.8], atol=1e-15)


def test_linear_schedule_matches_loop_oracle():
    s = make_linear_schedule(200, 1e-4, 0.02)
    running, expected = 1.0, []
    for i in range(200):
        beta = 1e-4 + (0.02 - 1e-4) * i / 199
        running *= 1.0 - beta
        expected.append(running)
    np.testing.assert_allclose(s.alpha_bar.numpy(), expected, rtol=1e-12)
    assert float(s.alpha_bar[199]) == pytest.approx(ALPHA_BAR_199, rel=1e-12)
    assert float(s.alpha_bar[99]) == pytest.approx(ALPHA_BAR_99, rel=1e-12)
    assert torch.all(s.alpha_bar[1:] < s.alpha_bar[:-1])
    assert float(s.beta[0]) == 1e-4 and float(s.beta[-1]) == pytest.approx(0.02)


def test_linear_schedule_t1_uses_start():
    assert make_linear_schedule(1, 0.1, 0.2).beta.tolist() == [0.1]


@pytest.mark.parametrize(
    "T, b0, b1", [(0, 1e-4, 0.02), (-3, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)]
)
def test_linear_schedule_rejects(T, b0, b1):
    with pytest.raises(ValueError):
        make_linear_schedule(T, b0, b1)


@given(T=st.integers(1, 500), b0=st.floats(1e-5, 0.1), span=st.floats(0.0, 0.5))
@settings(max_examples=50, deadline=None)
def test_schedule_invariants(T, b0, span):
    b1 = min(b0 + span, 0.9)
    s = make_linear_schedule(T, b0, b1)
    assert torch.all(s.alpha_bar[1:] < s.alpha_bar[:-1])
    assert torch.allclose(s.alpha_bar[1:], s.alpha_bar[:-1] * s.alpha[1:], rtol=1e-12)
    assert torch.all((s.beta > 0) & (s.beta < 1))


# -- forward process --------------------------------------------------------------------


def test_forward_zero_noise_limit():
    s = NoiseSchedule(beta=torch.tensor([1e-9], dtype=torch.float64), alpha=torch.tensor([1.0], dtype=torch.float64),
                      alpha_bar=torch.tensor([1.0], dtype=torch.float64))
    x0 = torch.randn(2, 1, 4, 4)
    assert torch.equal(forward_sample(x0, 0, torch.randn_like(x0), s), x0)


def test_forward_zero_eps():
    s = make_linear_schedule(50)
    x0 = torch.randn(3, 1, 4, 4, dtype=torch.float64)
    out = forward_sample(x0, 20, torch.zeros_like(x0), s)
    assert torch.allclose(out, math.sqrt(float(s.alpha_bar[20])) * x0, atol=1e-15)


def test_forward_per_sample_t():
    s = make_linear_schedule(50)
    x0 = torch.randn(3, 1, 2, 2, dtype=torch.float64)
    eps = torch.randn_like(x0)
    t = torch.tensor([0, 10, 49])
    out = forward_sample(x0, t, eps, s)
    for i in range(3):
        assert torch.allclose(out[i], forward_sample(x0[i:i + 1], int(t[i]), eps[i:i + 1], s)[0])


def test_forward_errors():
    s = make_linear_schedule(10)
    x0 = torch.zeros(1, 1, 4, 4)
    with pytest.raises(ValueError):
        forward_sample(x0, 0, torch.zeros(1, 1, 4, 5), s)
    for bad in (-1, 10):
        with pytest.raises(IndexError):
            forward_sample(x0, bad, torch.zeros_like(x0), s)
    with pytest.raises(IndexError):
        forward_sample(x0, torch.tensor([10]), torch.zeros_like(x0), s)


# -- self-refining noise ----------------------------------------------------------------


def test_sr_noise_reductions():
    eps = torch.randn(2, 3, 4, 4)
    m = torch.rand(4, 4)
    assert sr_noise(eps, m, 0.0) is eps
    assert torch.equal(sr_noise(eps, torch.zeros(4, 4), 0.3), eps)
    assert sr_noise(eps, None, 0.3) is eps


def test_sr_noise_direct_value():
    out = sr_noise(torch.zeros(2, 1, 3, 3), torch.ones(3, 3), 0.01)
    assert torch.allclose(out, torch.full((2, 1, 3, 3), 0.01))


def test_sr_noise_broadcasts_over_batch_and_channel():
    eps = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    m = torch.rand(4, 4, dtype=torch.float64)
    out = sr_noise(eps, m, 0.5)
    for b in range(2):
        for c in range(3):
            assert torch.equal(out[b, c], eps[b, c] + 0.5 * m)


def test_sr_noise_errors():
    eps = torch.zeros(1, 1, 4, 4)
    with pytest.raises(ValueError):
        sr_noise(eps, torch.zeros(4, 4), -0.1)
    with pytest.raises(ValueError):
        sr_noise(eps, torch.zeros(4, 5), 0.1)


def test_sr_forward_sample_composition():
    s = make_linear_schedule(30)
    x0, eps, m = torch.randn(2, 1, 4, 4), torch.randn(2, 1, 4, 4), torch.rand(4, 4)
    assert torch.equal(sr_forward_sample(x0, 7, eps, m, 0.0, s), forward_sample(x0, 7, eps, s))
    assert torch.equal(sr_forward_sample(x0, 7, eps, torch.zeros(4, 4), 0.2, s), forward_sample(x0, 7, eps, s))
    assert torch.equal(sr_forward_sample(x0, 7, eps, m, 0.2, s), forward_sample(x0, 7, sr_noise(eps, m, 0.2), s))


# -- loss -------------------------------------------------------------------------------


def test_sr_loss_zero_when_model_predicts_target():
    s = make_linear_schedule(20)
    x0, eps, m = torch.randn(2, 1, 4, 4), torch.randn(2, 1, 4, 4), torch.rand(4, 4)
    target = sr_noise(eps, m, 0.1)
    assert sr_loss(TargetModel(target), x0, 5, eps, m, 0.1, 0.0, s).item() == 0.0


def test_sr_loss_lambda_zero_is_plain_objective(small_model):
    s = make_linear_schedule(20)
    x0, eps = torch.randn(4, 1, 8, 8), torch.randn(4, 1, 8, 8)
    t = torch.tensor([0, 3, 9, 19])
    plain = torch.mean((eps - small_model(forward_sample(x0, t, eps, s), t)) ** 2)
    got = sr_loss(small_model, x0, t, eps, torch.rand(8, 8), 0.0, 0.0, s)
    assert torch.equal(got, plain)


def test_sr_loss_single_pixel_closed_form():
    s = make_linear_schedule(10)
    w, b, lam, m, x0v, ev, t = 0.3, -0.2, 0.05, 0.7, 0.4, -1.1, 6
    model = LinearPixelModel(w, b)
    x0 = torch.tensor([[[[x0v]]]], dtype=torch.float64)
    eps = torch.tensor([[[[ev]]]], dtype=torch.float64)
    loss = sr_loss(model, x0, t, eps, torch.tensor([[m]], dtype=torch.float64), lam, 0.0, s)
    ab = float(s.alpha_bar[t])
    e_sr = ev + lam * m
    xt = math.sqrt(ab) * x0v + math.sqrt(1 - ab) * e_sr
    assert loss.item() == pytest.approx((e_sr - (w * xt + b)) ** 2, rel=1e-12)


def test_sr_loss_diverges_loudly():
    s = make_linear_schedule(10)
    bad = TargetModel(torch.full((1, 1, 2, 2), float("nan")))
    with pytest.raises(DivergenceError):
        sr_loss(bad, torch.zeros(1, 1, 2, 2), 0, torch.zeros(1, 1, 2, 2), None, 0.0, 0.0, s)


def test_sample_timesteps_range_and_uniformity():
    g = torch.Generator().manual_seed(0)
    t = sample_timesteps(40_000, 8, g)
    assert int(t.min()) == 0 and int(t.max()) == 7
    counts = torch.bincount(t, minlength=8).double() / t.numel()
    assert torch.all((counts - 1 / 8).abs() < 0.01)


# -- reverse process --------------------------------------------------------------------


def test_reverse_step_t0_is_deterministic():
    s = make_linear_schedule(10)
    x = torch.randn(2, 1, 4, 4)
    a = reverse_step(ZeroModel(), x, 0, s, torch.Generator().manual_seed(1))
    b = reverse_step(ZeroModel(), x, 0, s, torch.Generator().manual_seed(2))
    assert torch.equal(a, b)


def test_reverse_step_zero_model_plug_in():
    s = make_linear_schedule(10)
    x = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    out = reverse_step(ZeroModel(), x, 5, s, z=torch.zeros_like(x))
    assert torch.allclose(out, x / math.sqrt(float(s.alpha[5])), atol=1e-15)


def test_full_chain_recovers_data_mean_with_optimal_linear_denoiser():
    # 1-pixel data x0 ~ N(mu, s^2): E[eps | x_t] is linear in x_t, so the exact
    # posterior-mean denoiser is available in closed form
    mu, sd = 0.6, 0.3
    sched = make_linear_schedule(100, 1e-4, 0.05)
    ab = sched.alpha_bar

    class Optimal(torch.nn.Module):
        def forward(self, x, t, mfam=None, lambda_rev=0.0):
            a = ab[t.long()].to(x.dtype).reshape(-1, 1, 1, 1)
            return torch.sqrt(1 - a) * (x - torch.sqrt(a) * mu) / (a * sd**2 + 1 - a)

    out = sample(Optimal(), sched, (1, 1, 1), torch.Generator().manual_seed(0), count=20_000)
    n = out.numel()
    assert abs(out.mean().item() - mu) < 4 * sd / math.sqrt(n) + 0.01
    assert out.std().item() == pytest.approx(sd, rel=0.1)


def test_sample_deterministic_and_validated(small_model):
    s = make_linear_schedule(10)
    a = sample(small_model, s, (1, 8, 8), 3, count=2)
    b = sample(small_model, s, (1, 8, 8), torch.Generator().manual_seed(3), count=2)
    assert torch.equal(a, b) and a.shape == (2, 1, 8, 8)
    with pytest.raises(ValueError):
        sample(small_model, s, (1, 8, 8), 0, count=0)


def test_sample_truncated_chain_length():
    calls = []

    class Counting(torch.nn.Module):
        def forward(self, x, t, mfam=None, lambda_rev=0.0):
            calls.append(int(t[0]))
            return torch.zeros_like(x)

    sample(Counting(), make_linear_schedule(20), (1, 2, 2), 0, steps=5)
    assert calls == [4, 3, 2, 1, 0]


def test_trained_samples_match_data_histogram(faces8, small_cfg, make_train_cfg):
    tr = Trainer(make_train_cfg(total_steps=400, base_steps=400, T=50, batch_size=16), faces8, small_cfg).run()
    gen = sample(tr.model.eval(), tr.sched, (1, 8, 8), 0, 256).clamp(-1, 1).numpy()
    noise = np.random.default_rng(0).standard_normal(gen.shape).clip(-1, 1)
    d = wasserstein_distance(gen.ravel(), faces8.ravel())
    assert d < 0.15
    assert d < 0.5 * wasserstein_distance(noise.ravel(), faces8.ravel())
