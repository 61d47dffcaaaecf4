"""Deterministic desk-scale dataset for smoke tests and demos.

Reference images are smooth random color textures; distorted versions come
from :func:`synthesize_distortions`. Labels are derived from the PSNR of each
distortion and mapped onto the PIPAL Elo scale, so there is a learnable
signal without any real human ratings.
"""
import os

import numpy as np
from scipy import ndimage

from .. import metrics
from .distortions import random_recipe, synthesize_distortions
from .io import load_image, save_image
from .manifest import PIPAL_MOS_MEAN, PIPAL_MOS_STD, SampleRecord, save_manifest


def random_texture(size, rng):
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / size
    img = np.zeros((h, w, 3))
    for c in range(3):
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 4, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            img[..., c] += np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
        img[..., c] += 2.0 * ndimage.gaussian_filter(rng.normal(size=(h, w)), 1.5)
    img -= img.min()
    img /= img.max()
    return img


def psnr_to_mos(psnr_db):
    z = np.clip((psnr_db - 30.0) / 6.0, -3.0, 3.0)
    return float(PIPAL_MOS_MEAN + PIPAL_MOS_STD * z)


def make_desk_dataset(root, n_refs=5, n_labeled=20, n_unlabeled=10, size=72, seed=0):
    """Write images plus ``labeled.csv`` and ``unlabeled.csv`` under ``root``.

    Distortions are spread round-robin over the references. Returns the two
    manifest paths.
    """
    rng = np.random.default_rng(seed)
    refs = []
    for i in range(n_refs):
        path = os.path.join(root, "ref", f"R{i:04d}.png")
        save_image(path, random_texture(size, rng))
        refs.append(path)

    def distort(idx, subdir):
        ref_path = refs[idx % n_refs]
        ref = load_image(ref_path)
        severity = rng.uniform(0.05, 1.0)
        dist = synthesize_distortions(ref, random_recipe(rng, severity), rng)
        ref_name = os.path.splitext(os.path.basename(ref_path))[0]
        path = os.path.join(root, subdir, f"{ref_name}_{idx:03d}.png")
        save_image(path, dist)
        return ref_path, path, ref

    labeled = []
    for i in range(n_labeled):
        ref_path, path, ref = distort(i, "dist")
        mos = psnr_to_mos(metrics.psnr(ref, load_image(path), data_range=1.0))
        labeled.append(SampleRecord(dist_path=path, ref_path=ref_path, mos=mos))
    unlabeled = []
    for i in range(n_unlabeled):
        ref_path, path, _ = distort(n_labeled + i, "unlabeled")
        unlabeled.append(SampleRecord(dist_path=path, ref_path=ref_path))

    lab_path = os.path.join(root, "labeled.csv")
    unl_path = os.path.join(root, "unlabeled.csv")
    save_manifest(labeled, lab_path)
    save_manifest(unlabeled, unl_path)
    return lab_path, unl_path
