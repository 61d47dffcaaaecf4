"""Checkpoint files.

A checkpoint is a ``torch.save`` archive holding a plain dict::

    format_version  int, currently 1
    kind            "fr_teacher" | "nr_student"
    config          config echo: {"conformer": {...}, "backbone": {...}} for
                    teachers, {"student": {...}} for students, plus "train"
    state_dict      named parameter/buffer tensors (frozen backbone excluded)
    epoch, step     training position when written
    normalizer      {"mu": float, "sigma": float}

Files are written to a temp name and renamed, so a reader never sees a
partial file. ``checkpoint_id`` is the first 16 hex chars of the sha256.
"""
import dataclasses
import hashlib
import os
from collections import OrderedDict

import torch

from .backbone import BackboneSpec, build_backbone
from .conformer import ConformerConfig, IQAConformer
from .data.manifest import MOSNormalizer
from .errors import ConfigError, MissingFile

FORMAT_VERSION = 1
KINDS = ("fr_teacher", "nr_student")


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _plain(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def atomic_torch_save(obj, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp{os.getpid()}"
    torch.save(obj, tmp)
    os.replace(tmp, path)


def state_dict_of(model):
    if hasattr(model, "head_state_dict"):
        return model.head_state_dict()
    return OrderedDict(model.state_dict())


def save_checkpoint(path, model, kind, config, epoch=0, step=0, normalizer=None, extra=None):
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    norm = normalizer or MOSNormalizer()
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": _plain(config),
        "state_dict": OrderedDict((k, v.detach().cpu().clone()) for k, v in state_dict_of(model).items()),
        "epoch": int(epoch),
        "step": int(step),
        "normalizer": {"mu": float(norm.mu), "sigma": float(norm.sigma)},
    }
    if extra:
        payload["extra"] = _plain(extra)
    atomic_torch_save(payload, path)
    return path


def load_checkpoint(path):
    if not os.path.exists(path):
        raise MissingFile(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    version = ckpt.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format_version {version!r} in {path}")
    return ckpt


def file_sha256(path, chunk=1 << 20):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(chunk), b""):
            h.update(block)
    return h.hexdigest()


def checkpoint_id(path):
    return file_sha256(path)[:16]


def normalizer_of(ckpt):
    n = ckpt.get("normalizer") or {}
    return MOSNormalizer(n.get("mu", MOSNormalizer().mu), n.get("sigma", MOSNormalizer().sigma))


def _tupled(d, *keys):
    d = dict(d)
    for k in keys:
        if k in d and d[k] is not None:
            d[k] = tuple(d[k])
    return d


def build_fr_model(config, allow_random_backbone=False):
    bspec = BackboneSpec(**_tupled(config["backbone"], "taps"))
    cfg = ConformerConfig(**_tupled(config["conformer"], "grid"))
    backbone = build_backbone(bspec, allow_random=allow_random_backbone)
    return IQAConformer(cfg, backbone)


def model_from_checkpoint(path_or_ckpt, allow_random_backbone=False):
    """Rebuild the model a checkpoint describes, load its weights, eval mode."""
    ckpt = load_checkpoint(path_or_ckpt) if isinstance(path_or_ckpt, (str, os.PathLike)) else path_or_ckpt
    if ckpt["kind"] == "fr_teacher":
        model = build_fr_model(ckpt["config"], allow_random_backbone)
        model.load_head_state_dict(ckpt["state_dict"])
    else:
        from .student import StudentSpec, build_student
        model = build_student(StudentSpec(**ckpt["config"]["student"]))
        model.load_state_dict(ckpt["state_dict"])
    model.normalizer = normalizer_of(ckpt)
    return model.eval()
