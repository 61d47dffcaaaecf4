"""Correlation metrics and classical full-reference baselines.

All functions are pure. Correlations take two equal-length score sequences;
PSNR/SSIM take numpy images shaped (H, W) or (H, W, C).
"""
import math

import numpy as np
from scipy import ndimage, stats

from .errors import DegenerateInput, ImageTooSmall, LengthMismatch, ShapeMismatch

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
# ITU-R BT.601 luma weights.
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise LengthMismatch(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise LengthMismatch(f"need at least 2 scores, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DegenerateInput("scores must be finite")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateInput("correlation undefined for a constant score vector")
    return x, y


def plcc(x, y):
    """Pearson linear correlation coefficient."""
    x, y = _pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    r = np.dot(dx, dy) / np.sqrt(np.dot(dx, dx) * np.dot(dy, dy))
    return float(np.clip(r, -1.0, 1.0))


def srcc(x, y, ties="average"):
    """Spearman rank correlation: PLCC on ranks.

    ``ties`` is any ``scipy.stats.rankdata`` method; the default assigns tied
    entries their average rank.
    """
    x, y = _pair(x, y)
    return plcc(stats.rankdata(x, method=ties), stats.rankdata(y, method=ties))


def _tied_pairs(v):
    _, counts = np.unique(v, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def _inversions(ranks, size):
    # Fenwick tree over ranks 1..size: pairs i < j with ranks[i] > ranks[j]
    tree = [0] * (size + 1)
    inv = 0
    for seen, r in enumerate(ranks):
        k, below = r, 0
        while k > 0:
            below += tree[k]
            k -= k & -k
        inv += seen - below
        k = r
        while k <= size:
            tree[k] += 1
            k += k & -k
    return inv


def krcc(x, y):
    """Kendall tau-b (tie corrected).

    Knight's O(n log n) count in integer arithmetic, so tie-free inputs give
    exactly (concordant - discordant) / pairs.
    """
    x, y = _pair(x, y)
    n = x.size
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]
    _, y_rank = np.unique(ys, return_inverse=True)
    swaps = _inversions((y_rank + 1).tolist(), int(y_rank.max()) + 1)
    n0 = n * (n - 1) // 2
    n1, n2 = _tied_pairs(x), _tied_pairs(y)
    joint = np.flatnonzero(np.r_[True, (xs[1:] != xs[:-1]) | (ys[1:] != ys[:-1]), True])
    g = np.diff(joint)
    n3 = int((g * (g - 1) // 2).sum())
    s = n0 - n1 - n2 + n3 - 2 * swaps
    tx, ty = n0 - n1, n0 - n2
    denom = tx if tx == ty else math.sqrt(tx) * math.sqrt(ty)
    return float(np.clip(s / denom, -1.0, 1.0))


def main_score(x, y):
    """Challenge ranking score: PLCC + SRCC."""
    return plcc(x, y) + srcc(x, y)


def correlations(pred, target):
    """All four evaluation numbers as a dict."""
    p = plcc(pred, target)
    s = srcc(pred, target)
    return {"plcc": p, "srcc": s, "krcc": krcc(pred, target), "main_score": p + s}


def _data_range(a, data_range):
    if data_range is not None:
        return float(data_range)
    return 255.0 if np.issubdtype(a.dtype, np.integer) else 1.0


def _check_images(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3) or (a.ndim == 3 and a.shape[2] not in (1, 3)):
        raise ShapeMismatch(f"expected (H, W) or (H, W, C) with C in {{1, 3}}, got {a.shape}")
    return a, b


def psnr(a, b, data_range=None, cap=PSNR_CAP):
    """Peak signal-to-noise ratio in dB.

    ``data_range`` defaults to 255 for integer images and 1.0 otherwise.
    Identical images return ``cap`` instead of infinity.
    """
    a, b = _check_images(a, b)
    peak = _data_range(a, data_range)
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0:
        return float(cap)
    return float(min(10.0 * np.log10(peak ** 2 / mse), cap))


def to_luma(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[..., 0]
    return img @ LUMA_WEIGHTS


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return g


def _filter_valid(img, g):
    # Separable Gaussian, keeping only positions where the full window fits.
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    r = len(g) // 2
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(a, b, data_range=None, window=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Mean single-scale SSIM over all valid window positions.

    RGB inputs are converted to BT.601 luma first.
    """
    a, b = _check_images(a, b)
    if min(a.shape[:2]) < window:
        raise ImageTooSmall(f"image {a.shape[:2]} smaller than the {window}x{window} window")
    peak = _data_range(a, data_range)
    x = to_luma(a)
    y = to_luma(b)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    g = gaussian_window(window, sigma)
    mx = _filter_valid(x, g)
    my = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))
