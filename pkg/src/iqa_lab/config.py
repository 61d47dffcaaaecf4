"""Run configuration: a YAML document mapped onto nested dataclasses.

Top-level keys::

    seed        int, default seed for every stage that does not set its own
    out_dir     output directory (``--out-dir`` overrides)
    data        manifests and image directories
    backbone    BackboneSpec fields plus ``allow_random``
    conformer   ConformerConfig fields
    train_fr    TrainConfig for the FR teacher (nested ``swa`` / ``plateau``)
    train_nr    TrainConfig for the NR student
    student     StudentSpec fields
    augment     augmentation switches
    tta         enhanced-prediction settings
    pseudo      pseudo-labeling inputs
    predict     inputs of the ``predict`` command

Unknown keys anywhere are rejected. Relative paths are resolved against the
directory holding the config file.
"""
import dataclasses
import os
import typing
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import yaml

from .backbone import BackboneSpec, inception_backbone_spec, tiny_backbone_spec
from .conformer import ConformerConfig, tiny_config
from .data.augment import AugmentationSpec, ColorJitter, CutOut
from .errors import ConfigError, MissingFile
from .inference import TTASpec
from .student import StudentSpec
from .training import PlateauConfig, SWAConfig, TrainConfig


@dataclass
class DataConfig:
    labeled: Optional[str] = None
    unlabeled: Optional[str] = None
    val: Optional[str] = None
    format: str = "csv"
    ref_dir: Optional[str] = None
    dist_dir: Optional[str] = None
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.format not in ("csv", "pipal"):
            raise ValueError("data.format must be 'csv' or 'pipal'")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("data.val_fraction must be in [0, 1)")


@dataclass
class BackboneConfig:
    kind: str = "tiny_desk"
    taps: Optional[Tuple[str, ...]] = None
    frozen: bool = True
    input_size: Optional[int] = None
    weights_path: Optional[str] = None
    allow_random: bool = False

    def spec(self) -> BackboneSpec:
        base = tiny_backbone_spec(self.input_size or 64) if self.kind == "tiny_desk" else inception_backbone_spec()
        return BackboneSpec(self.kind, tuple(self.taps) if self.taps else base.taps, self.frozen,
                            self.input_size or base.input_size, self.weights_path)


@dataclass
class AugmentConfig:
    # CutOut and colour jitter on top of the geometric pipeline, student only
    extra_augs: bool = True
    flip_h: float = 0.5
    flip_v: float = 0.5
    rot90_choices: Tuple[int, ...] = (0, 90, 180, 270)
    cutout_max_fraction: float = 0.25
    jitter: float = 0.1

    def spec(self, crop_size, extra) -> AugmentationSpec:
        cut = CutOut(True, self.cutout_max_fraction) if extra else CutOut()
        jit = ColorJitter(self.jitter, self.jitter, self.jitter) if extra else ColorJitter()
        return AugmentationSpec(crop_size, self.flip_h, self.flip_v, tuple(self.rot90_choices), cut, jit)


@dataclass
class TTAConfig:
    enabled: bool = True
    mode: str = "ten"
    flips: str = "h"
    nr_crops: int = 4

    def __post_init__(self):
        TTASpec(mode=self.mode, flips=self.flips)

    def spec(self, crop_size) -> Optional[TTASpec]:
        return TTASpec(crop_size=crop_size, mode=self.mode, flips=self.flips) if self.enabled else None


@dataclass
class PseudoConfig:
    teacher_checkpoints: List[str] = field(default_factory=list)
    tta: bool = True


@dataclass
class PredictConfig:
    checkpoints: List[str] = field(default_factory=list)
    manifest: Optional[str] = None
    weights: Optional[List[float]] = None


def _teacher_train():
    return TrainConfig(lr=1e-3, batch_size=4, epochs=3, swa=SWAConfig(True, 2))


def _student_train():
    return TrainConfig(lr=1e-3, batch_size=4, epochs=3, loss="mse_plus_pearson",
                       swa=SWAConfig(False, 1), plateau=PlateauConfig(True))


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    conformer: ConformerConfig = field(default_factory=tiny_config)
    train_fr: TrainConfig = field(default_factory=_teacher_train)
    train_nr: TrainConfig = field(default_factory=_student_train)
    student: StudentSpec = field(default_factory=StudentSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    tta: TTAConfig = field(default_factory=TTAConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    predict: PredictConfig = field(default_factory=PredictConfig)
    # where relative paths were resolved from; not a config key
    base_dir: str = field(default=".", metadata={"internal": True})


# ---------------------------------------------------------------- building

def _is_optional(tp):
    return typing.get_origin(tp) is typing.Union and type(None) in typing.get_args(tp)


def _strip_optional(tp):
    if _is_optional(tp):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0]
    return tp


def _coerce(value, tp, where):
    tp = _strip_optional(tp)
    if value is None:
        return None
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    origin = typing.get_origin(tp)
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        args = typing.get_args(tp)
        item = args[0] if args else typing.Any
        items = [_coerce(v, item, f"{where}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if tp in (int, float, str, bool) and not isinstance(value, tp):
        raise ConfigError(f"{where}: expected {tp.__name__}, got {value!r}")
    if tp is int and isinstance(value, bool):
        raise ConfigError(f"{where}: expected int, got {value!r}")
    return value


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if not f.metadata.get("internal")}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}; allowed: {sorted(fields)}")
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}" if where else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _resolve(base, p):
    if p is None:
        return None
    p = os.path.expanduser(p)
    return p if os.path.isabs(p) else os.path.normpath(os.path.join(base, p))


def _resolve_paths(cfg: RunConfig):
    b = cfg.base_dir
    d = cfg.data
    for k in ("labeled", "unlabeled", "val", "ref_dir", "dist_dir"):
        setattr(d, k, _resolve(b, getattr(d, k)))
    cfg.backbone.weights_path = _resolve(b, cfg.backbone.weights_path)
    if cfg.student.weights_path:
        cfg.student = dataclasses.replace(cfg.student, weights_path=_resolve(b, cfg.student.weights_path))
    cfg.pseudo.teacher_checkpoints = [_resolve(b, p) for p in cfg.pseudo.teacher_checkpoints]
    cfg.predict.checkpoints = [_resolve(b, p) for p in cfg.predict.checkpoints]
    cfg.predict.manifest = _resolve(b, cfg.predict.manifest)
    cfg.out_dir = _resolve(b, cfg.out_dir)


def _seed_train(section, data, seed):
    # stages without an explicit seed follow the run seed
    if "seed" not in (data or {}):
        return dataclasses.replace(section, seed=seed)
    return section


def config_from_dict(data, base_dir=".", seed=None, out_dir=None) -> RunConfig:
    data = dict(data or {})
    if seed is not None:
        data["seed"] = seed
    cfg = _build(RunConfig, data, "")
    cfg.base_dir = os.path.abspath(base_dir)
    cfg.train_fr = _seed_train(cfg.train_fr, data.get("train_fr"), cfg.seed)
    cfg.train_nr = _seed_train(cfg.train_nr, data.get("train_nr"), cfg.seed)
    if out_dir is not None:
        cfg.out_dir = os.path.abspath(out_dir)
    _resolve_paths(cfg)
    return cfg


def load_config(path=None, seed=None, out_dir=None) -> RunConfig:
    """Read a YAML config; ``seed`` and ``out_dir`` override the file."""
    if path is None:
        return config_from_dict({}, os.getcwd(), seed, out_dir)
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return config_from_dict(data, os.path.dirname(os.path.abspath(path)), seed, out_dir)


def config_to_dict(cfg: RunConfig):
    from .checkpoint import _plain
    d = _plain(cfg)
    d.pop("base_dir", None)
    return d


# ---------------------------------------------------------------- validation

REQUIRED_INPUTS = {
    "train-fr": [("data.labeled", "file")],
    "train-nr": [("data.labeled", "file")],
    "pseudo-label": [("data.unlabeled", "file"), ("pseudo.teacher_checkpoints", "files")],
    "noisy-student": [("data.labeled", "file"), ("data.unlabeled", "file")],
    "predict": [("predict.manifest", "file"), ("predict.checkpoints", "files")],
}


def _get(cfg, dotted):
    obj = cfg
    for part in dotted.split("."):
        obj = getattr(obj, part)
    return obj


def validate_inputs(cfg: RunConfig, command):
    """Check every input path a command will read, before any work starts."""
    for key, kind in REQUIRED_INPUTS.get(command, []):
        value = _get(cfg, key)
        values = value if kind == "files" else [value]
        if not values or any(v is None for v in values):
            raise ConfigError(f"{command} needs {key}")
        for v in values:
            if not os.path.exists(v):
                raise MissingFile(f"{key}: no such file {v}")
    optional = [("data.val", cfg.data.val), ("data.ref_dir", cfg.data.ref_dir),
                ("data.dist_dir", cfg.data.dist_dir), ("backbone.weights_path", cfg.backbone.weights_path),
                ("student.weights_path", cfg.student.weights_path)]
    if command in ("noisy-student", "pseudo-label") and cfg.data.labeled:
        optional.append(("data.labeled", cfg.data.labeled))
    for key, value in optional:
        if value is not None and not os.path.exists(value):
            raise MissingFile(f"{key}: no such path {value}")
    if command == "noisy-student" and cfg.data.val_fraction <= 0:
        raise ConfigError("noisy-student evaluates on a held-out split; data.val_fraction must be > 0")
    if cfg.data.format == "pipal" and command in ("train-fr", "train-nr", "noisy-student"):
        if not (cfg.data.ref_dir and cfg.data.dist_dir):
            raise ConfigError("data.format 'pipal' needs data.ref_dir and data.dist_dir")
