import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iqa_lab import metrics
from iqa_lab.errors import DegenerateInput, ImageTooSmall, LengthMismatch, ShapeMismatch

from oracles import (kendall_tau_b_pairs, kendall_tau_exact_fraction, pearson_loop,
                     spearman_bruteforce, ssim_loop)


def test_plcc_worked_examples():
    assert metrics.plcc([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0, abs=1e-12)
    assert metrics.plcc([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-12)
    # cov = 4, var_x = var_y = 5 (sums of squared deviations) -> 4/5
    assert metrics.plcc([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)


def test_srcc_worked_examples():
    assert metrics.srcc([1, 2, 3, 4], [10, 100, 1000, 10000]) == pytest.approx(1.0)
    assert metrics.srcc([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)
    expected = spearman_bruteforce([1, 1, 2], [1, 2, 3])
    assert expected == pytest.approx(math.sqrt(3) / 2, abs=1e-12)
    assert metrics.srcc([1, 1, 2], [1, 2, 3]) == pytest.approx(expected, abs=1e-12)


def test_srcc_tie_convention_knob():
    x, y = [1, 1, 2, 3], [4, 3, 2, 1]
    assert metrics.srcc(x, y, ties="average") != metrics.srcc(x, y, ties="ordinal")


def test_krcc_worked_examples():
    assert metrics.krcc([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert metrics.krcc([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(4 / 6, abs=1e-9)
    assert metrics.krcc([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_main_score_examples():
    assert metrics.main_score([1, 2, 5], [1, 2, 5]) == pytest.approx(2.0)
    assert metrics.main_score([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(1.6, abs=1e-12)
    assert metrics.main_score([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-2.0)


@pytest.mark.parametrize("fn", [metrics.plcc, metrics.srcc, metrics.krcc, metrics.main_score])
def test_errors(fn):
    with pytest.raises(LengthMismatch):
        fn([1, 2, 3], [1, 2])
    with pytest.raises(DegenerateInput):
        fn([1, 1, 1], [1, 2, 3])
    with pytest.raises(DegenerateInput):
        fn([1, 2, 3], [7, 7, 7])


def test_random_vectors_match_bruteforce():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 21))
        x = rng.normal(size=n)
        y = rng.normal(size=n) if rng.random() < 0.5 else rng.integers(0, 4, size=n).astype(float)
        if np.ptp(y) == 0:
            y[0] += 1.0
        xl, yl = x.tolist(), y.tolist()
        assert metrics.plcc(x, y) == pytest.approx(pearson_loop(xl, yl), abs=1e-9)
        assert metrics.srcc(x, y) == pytest.approx(spearman_bruteforce(xl, yl), abs=1e-9)
        assert metrics.krcc(x, y) == pytest.approx(kendall_tau_b_pairs(xl, yl), abs=1e-9)


@given(st.permutations(range(6)), st.permutations(range(6)))
def test_krcc_exhaustive_small(px, py):
    s, pairs = kendall_tau_exact_fraction(px, py)
    assert metrics.krcc(px, py) == s / pairs


def test_krcc_heavy_ties_match_pair_oracle():
    rng = np.random.default_rng(5)
    for _ in range(300):
        n = int(rng.integers(3, 25))
        x = rng.integers(0, 3, size=n).astype(float)
        y = rng.integers(0, 4, size=n).astype(float)
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            continue
        assert metrics.krcc(x, y) == pytest.approx(kendall_tau_b_pairs(x.tolist(), y.tolist()), abs=1e-12)


# a 1e-6 grid keeps values well separated relative to the shifts below, so
# the properties are not testing float cancellation
finite = st.integers(-10**9, 10**9).map(lambda k: k * 1e-6)


def _vectors(draw_n=st.integers(3, 15)):
    return draw_n.flatmap(lambda n: st.tuples(
        st.lists(finite, min_size=n, max_size=n, unique=True),
        st.lists(finite, min_size=n, max_size=n, unique=True)))


@settings(max_examples=100)
@given(_vectors(), st.floats(0.01, 100), st.floats(-100, 100))
def test_plcc_affine_invariance(xy, a, b):
    x, y = map(np.array, xy)
    assert metrics.plcc(a * x + b, y) == pytest.approx(metrics.plcc(x, y), abs=1e-9)


@settings(max_examples=100)
@given(_vectors())
def test_rank_metrics_monotone_invariance(xy):
    x, y = map(np.array, xy)
    tx = x ** 3 + 2 * x  # strictly increasing, no additive constant to absorb tiny values
    assert metrics.srcc(tx, y) == pytest.approx(metrics.srcc(x, y), abs=1e-12)
    assert metrics.krcc(tx, y) == pytest.approx(metrics.krcc(x, y), abs=1e-12)


@settings(max_examples=100)
@given(_vectors())
def test_symmetry_and_range(xy):
    x, y = xy
    for fn in (metrics.plcc, metrics.srcc, metrics.krcc):
        r = fn(x, y)
        assert -1.0 <= r <= 1.0
        assert r == pytest.approx(fn(y, x), abs=1e-12)


@settings(max_examples=50)
@given(_vectors())
def test_srcc_is_plcc_on_ranks(xy):
    x, y = map(np.array, xy)
    rx = np.argsort(np.argsort(x)) + 1
    ry = np.argsort(np.argsort(y)) + 1
    assert metrics.srcc(x, y) == metrics.plcc(rx, ry)


def test_psnr_examples():
    a = np.full((8, 8, 3), 100, dtype=np.uint8)
    assert metrics.psnr(a, a) == 100.0
    b = a + 16
    assert metrics.psnr(a, b) == pytest.approx(10 * math.log10(255 ** 2 / 256), abs=1e-12)
    assert metrics.psnr(a, b) == pytest.approx(24.05, abs=0.01)
    z = np.zeros((4, 4), dtype=np.uint8)
    w = np.full((4, 4), 255, dtype=np.uint8)
    assert metrics.psnr(z, w) == pytest.approx(0.0, abs=1e-12)
    assert metrics.psnr(z, w) == metrics.psnr(w, z)
    with pytest.raises(ShapeMismatch):
        metrics.psnr(z, np.zeros((4, 5), dtype=np.uint8))


def test_ssim_basic():
    rng = np.random.default_rng(1)
    a = rng.random((24, 24, 3))
    b = rng.random((24, 24, 3))
    assert metrics.ssim(a, a) == 1.0
    assert metrics.ssim(a, b) == metrics.ssim(b, a)
    with pytest.raises(ImageTooSmall):
        metrics.ssim(a[:10], b[:10])
    with pytest.raises(ShapeMismatch):
        metrics.ssim(a, b[:20])


def _checkerboard(n=32, cell=4):
    idx = np.arange(n) // cell
    return ((idx[:, None] + idx[None, :]) % 2).astype(np.float64)


def test_ssim_checkerboard_vs_loop_oracle():
    a = _checkerboard()
    b = 1.0 - a
    expected = ssim_loop(a, b, peak=1.0)
    assert metrics.ssim(a, b, data_range=1.0) == pytest.approx(expected, abs=1e-10)
    assert expected < 0


def test_ssim_matches_skimage():
    from skimage.metrics import structural_similarity

    rng = np.random.default_rng(3)
    a = rng.random((40, 37))
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert metrics.ssim(a, b, data_range=1.0) == pytest.approx(ref, abs=1e-6)


def test_ssim_rgb_uses_luma():
    rng = np.random.default_rng(4)
    a = rng.random((16, 16, 3))
    b = rng.random((16, 16, 3))
    la, lb = metrics.to_luma(a), metrics.to_luma(b)
    assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(la, lb), abs=1e-15)
