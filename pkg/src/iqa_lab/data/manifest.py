"""Dataset manifests, MOS standardization and train/val splitting."""
import csv
import logging
import math
import os
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from ..errors import EmptySplit, MissingFile, ParseError

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ("ref_path", "dist_path", "mos", "is_pseudo")

# Training-set MOS statistics of PIPAL (Elo scale).
PIPAL_MOS_MEAN = 1448.96
PIPAL_MOS_STD = 121.53


@dataclass(frozen=True)
class SampleRecord:
    dist_path: str
    ref_path: Optional[str] = None
    mos: Optional[float] = None
    is_pseudo: bool = False

    def __post_init__(self):
        if not self.dist_path:
            raise ValueError("dist_path is required")
        if self.is_pseudo and self.mos is None:
            raise ValueError(f"pseudo-labeled record without mos: {self.dist_path}")

    @property
    def labeled(self):
        return self.mos is not None


@dataclass(frozen=True)
class MOSNormalizer:
    mu: float = PIPAL_MOS_MEAN
    sigma: float = PIPAL_MOS_STD

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def standardize(self, mos):
        out = (np.asarray(mos, dtype=np.float64) - self.mu) / self.sigma
        return float(out) if out.ndim == 0 else out

    def destandardize(self, z):
        out = np.asarray(z, dtype=np.float64) * self.sigma + self.mu
        return float(out) if out.ndim == 0 else out

    @classmethod
    def fit(cls, values):
        """Population mean/std of ``values``."""
        v = np.asarray(list(values), dtype=np.float64)
        if v.size < 2 or np.ptp(v) == 0:
            raise ValueError("need at least two distinct values to fit a normalizer")
        return cls(float(v.mean()), float(v.std()))

    @classmethod
    def from_records(cls, records):
        return cls.fit(r.mos for r in records if r.mos is not None)


def standardize_mos(normalizer, mos):
    return normalizer.standardize(mos)


def destandardize_mos(normalizer, z):
    return normalizer.destandardize(z)


def _resolve(base, p):
    if p is None or p == "":
        return None
    return p if os.path.isabs(p) else os.path.normpath(os.path.join(base, p))


def _check_exists(records, path):
    for rec in records:
        for p in (rec.ref_path, rec.dist_path):
            if p is not None and not os.path.exists(p):
                raise MissingFile(f"{path}: referenced image not found: {p}")


def _parse_bool(text, path, line):
    t = text.strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no", ""):
        return False
    raise ParseError(f"bad is_pseudo value {text!r}", path, line)


def _parse_float(text, path, line):
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"bad score {text!r}", path, line) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite score {text!r}", path, line)
    return v


def pipal_reference_name(dist_name):
    """``A0001_00_00.bmp`` -> ``A0001.bmp``."""
    stem, ext = os.path.splitext(os.path.basename(dist_name))
    return stem.split("_", 1)[0] + ext


def _load_pipal(path, ref_dir, dist_dir):
    base = os.path.dirname(os.path.abspath(path))
    ref_dir = os.path.abspath(ref_dir) if ref_dir else base
    dist_dir = os.path.abspath(dist_dir) if dist_dir else base
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2 or not parts[0].strip():
                raise ParseError(f"expected 'name,score', got {line!r}", path, lineno)
            name = parts[0].strip()
            mos = _parse_float(parts[1].strip(), path, lineno)
            records.append(SampleRecord(
                dist_path=os.path.join(dist_dir, name),
                ref_path=os.path.join(ref_dir, pipal_reference_name(name)),
                mos=mos,
            ))
    return records


def _load_csv(path):
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(h.strip() for h in header) != MANIFEST_FIELDS:
            raise ParseError(f"expected header {','.join(MANIFEST_FIELDS)}, got {header}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", path, lineno)
            ref, dist, mos, pseudo = (c.strip() for c in row)
            if not dist:
                raise ParseError("empty dist_path", path, lineno)
            try:
                records.append(SampleRecord(
                    dist_path=_resolve(base, dist),
                    ref_path=_resolve(base, ref),
                    mos=_parse_float(mos, path, lineno) if mos else None,
                    is_pseudo=_parse_bool(pseudo, path, lineno),
                ))
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
    return records


def load_manifest(path, format="csv", ref_dir=None, dist_dir=None, check_files=True) -> List[SampleRecord]:
    """Read a manifest into records, in file order.

    ``format="pipal"`` reads ``name,score`` label files; references are found
    in ``ref_dir`` by filename prefix. ``format="csv"`` reads the internal
    ``ref_path,dist_path,mos,is_pseudo`` schema with paths relative to the
    manifest's directory.
    """
    if not os.path.exists(path):
        raise MissingFile(f"manifest not found: {path}")
    if format == "pipal":
        records = _load_pipal(path, ref_dir, dist_dir)
    elif format == "csv":
        records = _load_csv(path)
    else:
        raise ValueError(f"unknown manifest format {format!r}")
    if check_files:
        _check_exists(records, path)
    return records


def _fmt_path(p, base):
    if p is None:
        return ""
    try:
        return os.path.relpath(p, base)
    except ValueError:
        return p


def save_manifest(records, path):
    """Write the internal CSV schema atomically; paths stored relative to ``path``."""
    base = os.path.dirname(os.path.abspath(path))
    os.makedirs(base, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in records:
            w.writerow([_fmt_path(r.ref_path, base), _fmt_path(r.dist_path, base),
                        "" if r.mos is None else repr(float(r.mos)),
                        "true" if r.is_pseudo else "false"])
    os.replace(tmp, path)


def split_train_val(records, val_fraction=0.1, seed=0, group_by_reference=True):
    """Seeded disjoint split.

    With ``group_by_reference`` the unit of assignment is the reference image,
    so every distortion of a reference lands on the same side. The validation
    side gets ``round(val_fraction * n_groups)`` groups. Both sides keep the
    input order.
    """
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    keys = [(r.ref_path or r.dist_path) if group_by_reference else r.dist_path for r in records]
    groups = list(dict.fromkeys(keys))
    n_val = int(round(val_fraction * len(groups)))
    if n_val == 0 or n_val == len(groups):
        raise EmptySplit(f"{len(groups)} groups with val_fraction={val_fraction} leaves one side empty")
    order = np.random.default_rng(seed).permutation(len(groups))
    val_groups = {groups[i] for i in order[:n_val]}
    train = [r for r, k in zip(records, keys) if k not in val_groups]
    val = [r for r, k in zip(records, keys) if k in val_groups]
    return train, val
