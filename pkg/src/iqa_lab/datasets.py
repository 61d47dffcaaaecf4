"""Torch datasets over manifests.

Per-sample augmentation randomness is drawn from ``default_rng((seed, epoch,
index))`` so batches are reproducible regardless of worker count.
"""
import numpy as np
import torch
from torch.utils.data import Dataset

from .data.augment import AugmentationSpec, augment, center_crop
from .data.io import load_image
from .data.manifest import MOSNormalizer
from .errors import DataError, MissingReference


def to_tensor(img):
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32))


class _Base(Dataset):
    def __init__(self, normalizer, aug, seed, train, loader, cache):
        self.normalizer = normalizer or MOSNormalizer()
        self.aug = aug or AugmentationSpec()
        self.seed = seed
        self.train = train
        self.loader = loader or load_image
        self.epoch = 0
        self._cache = {} if cache else None

    def set_epoch(self, epoch):
        self.epoch = int(epoch)

    def _load(self, path):
        if self._cache is None:
            return self.loader(path)
        if path not in self._cache:
            self._cache[path] = self.loader(path)
        return self._cache[path]

    def _target(self, mos):
        z = 0.0 if mos is None else self.normalizer.standardize(mos)
        return torch.tensor(z, dtype=torch.float32)

    def _rng(self, index):
        return np.random.default_rng((self.seed, self.epoch, index))


class FRPairDataset(_Base):
    """(ref, dist, standardized target) triples; one geometric draw per pair."""

    def __init__(self, records, normalizer=None, aug=None, seed=0, train=True, loader=None, cache=True):
        super().__init__(normalizer, aug, seed, train, loader, cache)
        for r in records:
            if not r.ref_path:
                raise MissingReference(f"FR sample without reference: {r.dist_path}")
        self.records = list(records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        rec = self.records[i]
        ref, dist = self._load(rec.ref_path), self._load(rec.dist_path)
        if self.train:
            ref, dist = augment((ref, dist), self.aug, self._rng(i))
        else:
            ref, dist = center_crop(ref, self.aug.crop_size), center_crop(dist, self.aug.crop_size)
        return to_tensor(ref), to_tensor(dist), self._target(rec.mos)


class NRDataset(_Base):
    """(dist, standardized target) pairs.

    Only distorted paths are kept; any reference path seen at construction is
    remembered so an accidental read of one raises instead of leaking.
    """

    def __init__(self, records, normalizer=None, aug=None, seed=0, train=True, loader=None, cache=True):
        super().__init__(normalizer, aug, seed, train, loader, cache)
        self.items = [(r.dist_path, r.mos) for r in records]
        self._refs = frozenset(r.ref_path for r in records if r.ref_path) - {p for p, _ in self.items}

    def __len__(self):
        return len(self.items)

    def _load(self, path):
        if path in self._refs:
            raise DataError(f"NR pipeline attempted to read reference image {path}")
        return super()._load(path)

    def __getitem__(self, i):
        path, mos = self.items[i]
        img = self._load(path)
        img = augment(img, self.aug, self._rng(i)) if self.train else center_crop(img, self.aug.crop_size)
        return to_tensor(img), self._target(mos)
