"""Classical degradations for synthesizing unlabeled (ref, dist) pairs.

A recipe maps degradation names to strengths, e.g.
``{"resample": 4, "blur": 1.0, "jpeg": 30, "noise": 0.02}``. Degradations run
in registry order regardless of dict order. Extra backends (a GAN
super-resolver, say) can be added with :func:`register_degradation`.
"""
import numpy as np
from PIL import Image
from scipy import fft, ndimage

# IJG standard luminance quantization table.
JPEG_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def resample(img, factor, rng=None):
    """Bicubic downscale by ``factor`` then upscale back to the input size."""
    factor = int(factor)
    if factor <= 1:
        return img
    h, w = img.shape[:2]
    small = (max(1, w // factor), max(1, h // factor))
    chans = []
    for c in range(img.shape[2]):
        band = Image.fromarray(img[..., c].astype(np.float32))
        band = band.resize(small, Image.BICUBIC).resize((w, h), Image.BICUBIC)
        chans.append(np.asarray(band))
    return np.stack(chans, axis=-1)


def gaussian_blur(img, sigma, rng=None):
    if sigma <= 0:
        return img
    return ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")


def jpeg_quality_table(quality):
    q = int(np.clip(quality, 1, 100))
    scale = 5000 / q if q < 50 else 200 - 2 * q
    return np.clip(np.floor((JPEG_LUMA_TABLE * scale + 50) / 100), 1, 255)


def jpeg_blocking(img, quality, rng=None):
    """8x8 block DCT quantization at the given IJG quality (1-100)."""
    if quality is None or quality >= 100:
        return img
    table = jpeg_quality_table(quality)
    h, w = img.shape[:2]
    ph, pw = (-h) % 8, (-w) % 8
    x = np.pad(img * 255.0 - 128.0, ((0, ph), (0, pw), (0, 0)), mode="edge")
    H, W, C = x.shape
    blocks = x.reshape(H // 8, 8, W // 8, 8, C).transpose(0, 2, 4, 1, 3)
    coef = fft.dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / table) * table
    blocks = fft.idctn(coef, axes=(-2, -1), norm="ortho")
    x = blocks.transpose(0, 3, 1, 4, 2).reshape(H, W, C)
    return (x[:h, :w] + 128.0) / 255.0


def gaussian_noise(img, sigma, rng):
    if sigma <= 0:
        return img
    return img + rng.normal(0.0, sigma, size=img.shape)


DEGRADATIONS = {
    "resample": resample,
    "blur": gaussian_blur,
    "jpeg": jpeg_blocking,
    "noise": gaussian_noise,
}


def register_degradation(name, fn):
    """Add ``fn(img, strength, rng) -> img`` to the registry, applied after the built-ins."""
    DEGRADATIONS[name] = fn


def synthesize_distortions(ref, recipe, rng):
    """Apply every degradation named in ``recipe`` to a float HWC image in [0, 1]."""
    if not recipe:
        raise ValueError("recipe must name at least one degradation")
    unknown = set(recipe) - set(DEGRADATIONS)
    if unknown:
        raise ValueError(f"unknown degradations: {sorted(unknown)}")
    squeeze = ref.ndim == 2
    out = ref[..., None] if squeeze else ref
    out = out.astype(np.float64)
    for name, fn in DEGRADATIONS.items():
        if name in recipe:
            out = fn(out, recipe[name], rng)
    out = np.clip(out, 0.0, 1.0).astype(ref.dtype, copy=False)
    return out[..., 0] if squeeze else out


def random_recipe(rng, severity=None):
    """Draw a recipe with one or two degradations at a severity in [0, 1]."""
    s = float(rng.uniform(0.05, 1.0)) if severity is None else float(severity)
    options = {
        "resample": lambda: int(round(1 + 3 * s)),
        "blur": lambda: 0.3 + 2.2 * s,
        "jpeg": lambda: int(round(90 - 80 * s)),
        "noise": lambda: 0.005 + 0.08 * s,
    }
    names = list(options)
    k = int(rng.integers(1, 3))
    picked = rng.choice(len(names), size=k, replace=False)
    return {names[i]: options[names[i]]() for i in sorted(picked)}
