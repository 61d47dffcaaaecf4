"""Training-time augmentation on HWC float images in [0, 1].

Geometric ops (flips, 90-degree rotations, crop) are drawn once and applied
to every image passed in, so a (ref, dist) pair stays pixel-aligned.
Photometric jitter and CutOut touch only the distorted image.
"""
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from ..errors import CropTooLarge


@dataclass(frozen=True)
class ColorJitter:
    saturation: float = 0.0
    brightness: float = 0.0
    contrast: float = 0.0

    @property
    def enabled(self):
        return any(v > 0 for v in (self.saturation, self.brightness, self.contrast))


@dataclass(frozen=True)
class CutOut:
    enabled: bool = False
    max_fraction: float = 0.25


@dataclass(frozen=True)
class AugmentationSpec:
    crop_size: int = 224
    flip_h: float = 0.5
    flip_v: float = 0.5
    rot90_choices: Tuple[int, ...] = (0, 90, 180, 270)
    cutout: CutOut = field(default_factory=CutOut)
    color_jitter: ColorJitter = field(default_factory=ColorJitter)

    def __post_init__(self):
        for name in ("flip_h", "flip_v"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        if not self.rot90_choices or any(r not in (0, 90, 180, 270) for r in self.rot90_choices):
            raise ValueError(f"rot90_choices must be a non-empty subset of 0/90/180/270, got {self.rot90_choices}")
        if not 0.0 < self.cutout.max_fraction < 1.0:
            raise ValueError("cutout.max_fraction must be in (0, 1)")
        if self.crop_size < 1:
            raise ValueError("crop_size must be positive")

    @property
    def has_extra(self):
        return self.cutout.enabled or self.color_jitter.enabled


def base_augmentation(crop_size=224):
    """Flips, 90-degree rotations and a random crop."""
    return AugmentationSpec(crop_size=crop_size)


def extra_augmentation(crop_size=224, max_fraction=0.25, jitter=0.1):
    """Base pipeline plus CutOut and saturation/brightness/contrast jitter."""
    return AugmentationSpec(crop_size=crop_size, cutout=CutOut(True, max_fraction),
                            color_jitter=ColorJitter(jitter, jitter, jitter))


def identity_augmentation(crop_size):
    return AugmentationSpec(crop_size=crop_size, flip_h=0.0, flip_v=0.0, rot90_choices=(0,))


def draw_geometry(shape, spec, rng):
    """Sample (flip_h, flip_v, k_rot90, top, left) for an (H, W) image."""
    fh = bool(rng.random() < spec.flip_h)
    fv = bool(rng.random() < spec.flip_v)
    k = int(rng.choice(spec.rot90_choices)) // 90
    h, w = shape[:2]
    if k % 2:
        h, w = w, h
    c = spec.crop_size
    if c > h or c > w:
        raise CropTooLarge(f"crop {c} larger than image {h}x{w}")
    top = int(rng.integers(0, h - c + 1))
    left = int(rng.integers(0, w - c + 1))
    return fh, fv, k, top, left


def apply_geometry(img, geom, crop_size):
    fh, fv, k, top, left = geom
    if fh:
        img = img[:, ::-1]
    if fv:
        img = img[::-1]
    if k:
        img = np.rot90(img, k)
    return np.ascontiguousarray(img[top:top + crop_size, left:left + crop_size])


def _gray(img):
    return img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype) if img.shape[2] == 3 else img[..., 0]


def color_jitter(img, jitter, rng):
    out = img
    if jitter.brightness > 0:
        out = out * rng.uniform(1 - jitter.brightness, 1 + jitter.brightness)
    if jitter.contrast > 0:
        f = rng.uniform(1 - jitter.contrast, 1 + jitter.contrast)
        out = (out - _gray(out).mean()) * f + _gray(out).mean()
    if jitter.saturation > 0 and out.shape[2] == 3:
        f = rng.uniform(1 - jitter.saturation, 1 + jitter.saturation)
        g = _gray(out)[..., None]
        out = (out - g) * f + g
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


def cutout_box(shape, max_fraction, rng):
    """One axis-aligned box (top, left, height, width) fully inside the image."""
    h, w = shape[:2]
    area = rng.uniform(0.0, max_fraction) * h * w
    aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    bh = int(np.clip(np.sqrt(area * aspect), 1, h))
    bw = int(np.clip(area / bh, 1, w))
    while bh * bw > max_fraction * h * w and bw > 1:
        bw -= 1
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    return top, left, bh, bw


def apply_cutout(img, box):
    top, left, bh, bw = box
    out = img.copy()
    out[top:top + bh, left:left + bw] = 0
    return out


def augment(images, spec, rng):
    """Augment one image or an aligned ``(ref, dist)`` pair.

    Returns the same structure that was passed in. Labels are never touched.
    """
    pair = isinstance(images, (tuple, list))
    imgs = list(images) if pair else [images]
    shape = imgs[0].shape
    if any(im.shape != shape for im in imgs):
        raise ValueError("paired images must share a shape")
    geom = draw_geometry(shape, spec, rng)
    out = [apply_geometry(im, geom, spec.crop_size) for im in imgs]
    # the distorted image is last in a pair and the only one in NR mode
    noisy = out[-1]
    if spec.color_jitter.enabled:
        noisy = color_jitter(noisy, spec.color_jitter, rng)
    if spec.cutout.enabled:
        noisy = apply_cutout(noisy, cutout_box(noisy.shape, spec.cutout.max_fraction, rng))
    out[-1] = noisy
    return tuple(out) if pair else out[0]


def center_crop(img, crop_size):
    h, w = img.shape[:2]
    if crop_size > h or crop_size > w:
        raise CropTooLarge(f"crop {crop_size} larger than image {h}x{w}")
    top = (h - crop_size) // 2
    left = (w - crop_size) // 2
    return np.ascontiguousarray(img[top:top + crop_size, left:left + crop_size])
