"""Enhanced prediction (crop/flip TTA), batch prediction and score fusion.

Images are HxWx3 float arrays in [0, 1]; predictions come back on the raw
MOS scale of the model's normalizer.
"""
import csv
import os
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .data.augment import center_crop
from .data.io import load_image
from .data.manifest import MOSNormalizer
from .datasets import to_tensor
from .errors import CropTooLarge, DegenerateInput, IdSetMismatch, ParseError

TTA_MODES = ("ten", "nine")
FLIP_SETS = {"h": ("none", "h"), "hv": ("none", "h", "v", "hv")}


@dataclass(frozen=True)
class TTASpec:
    """``ten``: 5 offsets x flips.  ``nine``: 4 corners x flips + plain center."""

    crop_size: int = 192
    mode: str = "ten"
    flips: str = "h"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in TTA_MODES:
            raise ValueError(f"mode must be one of {TTA_MODES}")
        if self.flips not in FLIP_SETS:
            raise ValueError(f"flips must be one of {tuple(FLIP_SETS)}")


def tta_offsets(dims, crop):
    h, w = dims[:2]
    if crop > h or crop > w:
        raise CropTooLarge(f"crop {crop} larger than image {h}x{w}")
    dh, dw = h - crop, w - crop
    return [(0, 0), (0, dw), (dh, 0), (dh, dw), (dh // 2, dw // 2)]


def enumerate_tta(dims, spec: TTASpec) -> List[Tuple[Tuple[int, int], str]]:
    offsets = tta_offsets(dims, spec.crop_size)
    flips = FLIP_SETS[spec.flips]
    if spec.mode == "ten":
        return [(o, f) for o in offsets for f in flips]
    return [(o, f) for o in offsets[:4] for f in flips] + [(offsets[4], "none")]


def apply_variant(img, offset, flip, crop):
    top, left = offset
    out = img[top:top + crop, left:left + crop]
    if flip in ("h", "hv"):
        out = out[:, ::-1]
    if flip in ("v", "hv"):
        out = out[::-1]
    return np.ascontiguousarray(out)


def _input_size(model):
    if hasattr(model, "backbone") and model.backbone is not None:
        return model.backbone.spec.input_size
    return model.spec.input_size


def _normalizer(model, normalizer):
    return normalizer or getattr(model, "normalizer", None) or MOSNormalizer()


def _mean(z):
    # offsets from the first view: identical views average to that view exactly
    return float(z[0] + (z - z[0]).mean())


def _chunks(n, batch):
    step = n if batch else 1
    return [slice(i, i + step) for i in range(0, n, step)]


@torch.no_grad()
def _fr_batch(model, refs, dists, batch=False):
    # batched and single forwards can differ in the last float32 bits, so one
    # view per forward is the default
    model.eval()
    ref = torch.stack([to_tensor(r) for r in refs])
    dist = torch.stack([to_tensor(d) for d in dists])
    return torch.cat([model(ref[s], dist[s]) for s in _chunks(len(refs), batch)]).double()


@torch.no_grad()
def _nr_batch(model, dists, batch=False):
    model.eval()
    x = torch.stack([to_tensor(d) for d in dists])
    return torch.cat([model(x[s]) for s in _chunks(len(dists), batch)]).double()


def predict_fr_variant(model, ref, dist, offset, flip, normalizer=None):
    """One (offset, flip) view of the pair, same transform on both images."""
    crop = _input_size(model)
    z = _fr_batch(model, [apply_variant(ref, offset, flip, crop)], [apply_variant(dist, offset, flip, crop)])
    return float(_normalizer(model, normalizer).destandardize(float(z[0])))


def predict_fr(model, ref, dist, tta: Optional[TTASpec] = None, normalizer=None, batch=False):
    crop = _input_size(model)
    if ref.shape != dist.shape:
        raise ValueError("reference and distorted images must share a shape")
    if tta is None:
        z = _fr_batch(model, [center_crop(ref, crop)], [center_crop(dist, crop)])
    else:
        if tta.crop_size != crop:
            raise ValueError(f"TTA crop {tta.crop_size} != model input {crop}")
        variants = enumerate_tta(ref.shape, tta)
        z = _fr_batch(model, [apply_variant(ref, o, f, crop) for o, f in variants],
                      [apply_variant(dist, o, f, crop) for o, f in variants], batch)
    return float(_normalizer(model, normalizer).destandardize(_mean(z)))


def random_crop_offsets(dims, crop, k, seed):
    h, w = dims[:2]
    if crop > h or crop > w:
        raise CropTooLarge(f"crop {crop} larger than image {h}x{w}")
    rng = np.random.default_rng(seed)
    return [(int(rng.integers(0, h - crop + 1)), int(rng.integers(0, w - crop + 1))) for _ in range(k)]


def predict_nr(model, dist, tta_random_crops=4, seed=0, normalizer=None, batch=False):
    """Mean over ``k`` seeded random crops; ``k=0`` means one center crop."""
    crop = _input_size(model)
    if tta_random_crops <= 0:
        views = [center_crop(dist, crop)]
    else:
        views = [apply_variant(dist, o, "none", crop)
                 for o in random_crop_offsets(dist.shape, crop, tta_random_crops, seed)]
    z = _nr_batch(model, views, batch)
    return float(_normalizer(model, normalizer).destandardize(_mean(z)))


def image_id(record_or_path):
    path = getattr(record_or_path, "dist_path", record_or_path)
    return os.path.basename(path)


def predict_records(model, records, kind="fr", tta=None, nr_crops=4, seed=0, normalizer=None,
                    loader=load_image):
    """OrderedDict image_id -> raw score, in record order."""
    out = OrderedDict()
    for rec in records:
        dist = loader(rec.dist_path)
        if kind == "fr":
            score = predict_fr(model, loader(rec.ref_path), dist, tta, normalizer)
        else:
            score = predict_nr(model, dist, nr_crops, seed, normalizer)
        iid = image_id(rec)
        if iid in out:
            raise IdSetMismatch(f"duplicate image id {iid}")
        out[iid] = score
    return out


# ---------------------------------------------------------------- tables

def save_prediction_table(scores: Dict[str, float], path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "score"])
        for k, v in scores.items():
            w.writerow([k, repr(float(v))])
    os.replace(tmp, path)
    return path


def load_prediction_table(path) -> "OrderedDict[str, float]":
    out = OrderedDict()
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        return out
    start = 1 if [c.strip() for c in rows[0]] == ["image_id", "score"] else 0
    for lineno, row in enumerate(rows[start:], start=start + 1):
        if not row:
            continue
        if len(row) != 2:
            raise ParseError("expected image_id,score", path, lineno)
        try:
            score = float(row[1])
        except ValueError:
            raise ParseError(f"bad score {row[1]!r}", path, lineno) from None
        if row[0] in out:
            raise ParseError(f"duplicate image id {row[0]!r}", path, lineno)
        out[row[0]] = score
    return out


def ensemble_scores(tables: Sequence[Dict[str, float]], weights=None, normalizers=None, target=None):
    """Weighted mean of standardized member scores, mapped back to one MOS scale.

    ``normalizers`` gives one MOSNormalizer per table; by default each table
    is z-scored with its own mean and std. ``target`` defaults to the
    weight-averaged member normalizer, so a single table comes back unchanged
    and the result does not depend on table order.
    """
    if not tables:
        raise ValueError("need at least one prediction table")
    ids = sorted(tables[0])
    for t in tables[1:]:
        if set(t) != set(ids):
            extra = sorted(set(t) ^ set(ids))[:5]
            raise IdSetMismatch(f"image-id sets differ, e.g. {extra}")
    w = np.ones(len(tables)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(tables),) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative, one per table, not all zero")
    w = w / w.sum()
    if normalizers is None:
        normalizers = []
        for t in tables:
            vals = np.array([t[i] for i in ids], dtype=np.float64)
            if vals.std() == 0:
                raise DegenerateInput("constant prediction table cannot be standardized")
            normalizers.append(MOSNormalizer.fit(vals))
    if len(normalizers) != len(tables):
        raise ValueError("one normalizer per table required")
    if target is None:
        target = MOSNormalizer(float(sum(wi * n.mu for wi, n in zip(w, normalizers))),
                               float(sum(wi * n.sigma for wi, n in zip(w, normalizers))))
    z = np.zeros(len(ids))
    for wi, t, n in zip(w, tables, normalizers):
        z += wi * n.standardize(np.array([t[i] for i in ids], dtype=np.float64))
    return OrderedDict(zip(ids, (float(v) for v in target.destandardize(z))))
