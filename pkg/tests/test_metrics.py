import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg
from scipy.stats import spearmanr
from skimage.metrics import structural_similarity
from sklearn.exceptions import NotFittedError

from srdiff.data import make_quadrant_dataset
from srdiff.highlighter import FlawHighlighter
from srdiff.metrics import (
    PERCEPTUAL_LABEL,
    PixelPCAEmbedder,
    desk_fid,
    feature_stats,
    frechet_distance,
    perceptual_distance,
    psnr,
    ssim,
    write_metric_rows,
)


def random_spd(d, rng):
    a = rng.standard_normal((d, d))
    return a @ a.T + 0.1 * np.eye(d)


def scipy_frechet(mu1, c1, mu2, c2):
    covmean = linalg.sqrtm(c1 @ c2).real
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(c1 + c2 - 2 * covmean))


# -- Fréchet distance -------------------------------------------------------------------


def test_frechet_identical_and_1d():
    rng = np.random.default_rng(0)
    mu, cov = rng.standard_normal(5), random_spd(5, rng)
    assert abs(frechet_distance(mu, cov, mu, cov)) <= 1e-6
    one = np.eye(1)
    assert frechet_distance([0.0], one, [1.0], one) == pytest.approx(1.0, abs=1e-4)
    assert frechet_distance([0.0], one, [0.0], 4 * one) == pytest.approx(1.0, abs=1e-4)


@pytest.mark.parametrize("d", [2, 5, 16])
def test_frechet_matches_scipy_and_is_symmetric(d):
    rng = np.random.default_rng(d)
    mu1, mu2 = rng.standard_normal(d), rng.standard_normal(d)
    c1, c2 = random_spd(d, rng), random_spd(d, rng)
    ab = frechet_distance(mu1, c1, mu2, c2)
    assert abs(ab - frechet_distance(mu2, c2, mu1, c1)) <= 1e-9
    assert ab == pytest.approx(scipy_frechet(mu1, c1, mu2, c2), rel=1e-8)
    assert ab >= 0


def test_frechet_singular_covariances():
    c = np.diag([1.0, 0.0])
    assert frechet_distance(np.zeros(2), c, np.zeros(2), c) == pytest.approx(0.0, abs=1e-12)


def test_frechet_errors():
    with pytest.raises(ValueError):
        frechet_distance(np.zeros(2), np.eye(2), np.zeros(3), np.eye(3))
    with pytest.raises(ValueError):
        frechet_distance(np.zeros(2), np.diag([1.0, -0.5]), np.zeros(2), np.eye(2))


@given(d=st.integers(1, 6), seed=st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_frechet_properties(d, seed):
    rng = np.random.default_rng(seed)
    mu1, mu2 = rng.standard_normal(d), rng.standard_normal(d)
    c1, c2 = random_spd(d, rng), random_spd(d, rng)
    v = frechet_distance(mu1, c1, mu2, c2)
    assert v >= 0
    assert abs(v - frechet_distance(mu2, c2, mu1, c1)) <= 1e-9 * max(1.0, v)


# -- desk-FID ---------------------------------------------------------------------------


def test_desk_fid_self_and_ordering(faces16):
    emb = PixelPCAEmbedder(n_components=8).fit(faces16)
    assert abs(desk_fid(faces16, faces16, emb)) <= 1e-6
    half = len(faces16) // 2
    halves = desk_fid(faces16[:half], faces16[half:], emb)
    noise = np.random.default_rng(0).uniform(-1, 1, faces16.shape).astype(np.float32)
    assert 0 < halves < desk_fid(faces16, noise, emb)


def test_desk_fid_tracks_analytic_gaussian_distance():
    rng = np.random.default_rng(0)
    real = rng.standard_normal((4000, 1, 2, 2)).astype(np.float32)
    flat = lambda X: np.asarray(X).reshape(len(X), -1)
    values = []
    for shift in (1.0, 0.5, 0.25, 0.0):
        gen = (rng.standard_normal((4000, 1, 2, 2)) + shift).astype(np.float32)
        got = desk_fid(real, gen, flat)
        values.append(got)
        assert got == pytest.approx(4 * shift**2, abs=0.05)
    assert values == sorted(values, reverse=True)


def test_desk_fid_needs_two_samples_and_features(faces16):
    emb = PixelPCAEmbedder(n_components=4).fit(faces16)
    with pytest.raises(ValueError):
        desk_fid(faces16[:1], faces16, emb)
    with pytest.raises(ValueError):
        desk_fid(faces16, faces16, lambda X: np.zeros((len(X), 1)))


def test_feature_stats_shapes():
    mu, cov = feature_stats(np.random.default_rng(0).standard_normal((10, 3)))
    assert mu.shape == (3,) and cov.shape == (3, 3)


# -- PSNR / SSIM ------------------------------------------------------------------------


def test_psnr_examples():
    a = np.random.default_rng(0).uniform(-1, 1, (1, 1, 8, 8))
    assert psnr(a, a) == math.inf
    b = np.full((4, 4), 0.5)
    c = b + 0.1  # MSE = 0.01
    assert psnr(b, c, data_range=1.0) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a + 0.05) == psnr(a + 0.05, a)
    with pytest.raises(ValueError):
        psnr(a, a[..., :4])
    with pytest.raises(ValueError):
        psnr(a, a, data_range=0)


def test_ssim_examples():
    rng = np.random.default_rng(0)
    a = rng.uniform(-1, 1, (1, 1, 16, 16))
    assert abs(ssim(a, a) - 1.0) <= 1e-9
    pattern = (rng.uniform(size=(16, 16)) > 0.5).astype(float)
    assert ssim(pattern, 1 - pattern, data_range=1.0) < 0.5
    b = np.clip(a + 0.2 * rng.standard_normal(a.shape), -1, 1)
    assert ssim(a, b) == ssim(b, a)
    with pytest.raises(ValueError):
        ssim(a[..., :10, :10], a[..., :10, :10])


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_reference_implementation(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (20, 24))
    b = np.clip(a + 0.3 * rng.standard_normal(a.shape), -1, 1)
    ref = structural_similarity(a, b, data_range=2.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-10)


@given(seed=st.integers(0, 10_000), amp=st.one_of(st.just(0.0), st.floats(1e-3, 1.0)))
@settings(max_examples=30, deadline=None)
def test_ssim_bounded_with_equality_iff_identical(seed, amp):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (12, 12))
    b = a + amp * rng.standard_normal(a.shape)
    v = ssim(a, b)
    assert -1 <= v <= 1
    if amp > 0:
        assert v < 1


# -- perceptual distance ----------------------------------------------------------------


@pytest.fixture(scope="module")
def small_highlighter():
    X, y = make_quadrant_dataset(80, size=16, seed=0)
    return FlawHighlighter(channels=(8, 16, 16), epochs=3).fit(X, y)


def test_perceptual_basic(small_highlighter):
    X, _ = make_quadrant_dataset(5, size=16, seed=3)
    assert np.array_equal(perceptual_distance(X, X, small_highlighter), np.zeros(10))
    Y = X[::-1].copy()
    d = perceptual_distance(X, Y, small_highlighter)
    assert np.all(d >= 0) and np.allclose(d, perceptual_distance(Y, X, small_highlighter))
    assert PERCEPTUAL_LABEL == "highlighter-perceptual distance"


def test_perceptual_monotone_in_noise(small_highlighter):
    rng = np.random.default_rng(0)
    X, _ = make_quadrant_dataset(5, size=16, seed=4)
    noise = rng.standard_normal(X.shape).astype(np.float32)
    levels = np.linspace(0.05, 1.0, 10)
    means = [perceptual_distance(X, X + a * noise, small_highlighter).mean() for a in levels]
    assert spearmanr(levels, means).statistic > 0.9


def test_perceptual_untrained():
    with pytest.raises(NotFittedError):
        perceptual_distance(np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 8, 8)), FlawHighlighter())


# -- tables -----------------------------------------------------------------------------


def test_metric_rows_csv_and_jsonl(tmp_path):
    rows = [{"metric": "PSNR", "split": "wide", "value": 12.5, "seed": 0},
            {"metric": "SSIM", "split": "wide", "value": 0.4, "seed": 0, "embedder": "x"}]
    write_metric_rows(rows, tmp_path / "m.csv", tmp_path / "m.jsonl")
    with open(tmp_path / "m.csv") as fh:
        read = list(csv.DictReader(fh))
    assert list(read[0])[:4] == ["metric", "split", "value", "seed"]
    assert float(read[1]["value"]) == 0.4
    lines = [json.loads(line) for line in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert lines == rows
