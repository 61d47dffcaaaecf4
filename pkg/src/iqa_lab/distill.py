"""Noisy-student distillation: FR teacher -> pseudo-labels -> NR student.

Stages of :func:`run_noisy_student`, each writing under ``out_dir``:

    split     train_manifest.csv, val_manifest.csv
    teacher   teacher/ (checkpoints, train_log.csv, final.pt)
    pseudo    pseudo_labels.csv
    extend    extended_manifest.csv
    student   student/ (checkpoints, train_log.csv)
    evaluate  student_predictions.csv, eval_report.json

``provenance.json`` records inputs, outputs, checkpoint hashes and seeds.
"""
import dataclasses
import json
import logging
import os
import platform
import shutil
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from . import __version__
from .backbone import BackboneSpec, tiny_backbone_spec
from .checkpoint import _plain, checkpoint_id, file_sha256, model_from_checkpoint
from .conformer import ConformerConfig, tiny_config
from .data.augment import AugmentationSpec, ColorJitter, CutOut, base_augmentation, extra_augmentation
from .data.io import load_image
from .data.manifest import SampleRecord, load_manifest, save_manifest, split_train_val
from .errors import DuplicateDistortedPath, MissingFile, MissingReference, StageError
from .evaluation import evaluate, labels_by_id
from .inference import TTASpec, predict_fr, predict_records, save_prediction_table
from .student import StudentSpec
from .training import SWAConfig, TrainConfig, nr_train_config, train_fr, train_nr

log = logging.getLogger(__name__)


@dataclass
class PseudoLabelReport:
    n_unlabeled_in: int = 0
    n_labeled_out: int = 0
    teacher_id: str = ""
    score_min: float = 0.0
    score_mean: float = 0.0
    score_max: float = 0.0
    skipped: List[str] = field(default_factory=list)


class Teacher:
    """One FR model or an ensemble; the ensemble score is the member mean."""

    def __init__(self, models, ids=None):
        self.models = list(models)
        if not self.models:
            raise ValueError("teacher needs at least one model")
        self.ids = list(ids) if ids else [f"model{i}" for i in range(len(self.models))]

    @classmethod
    def from_checkpoints(cls, paths, allow_random_backbone=False):
        models = [model_from_checkpoint(p, allow_random_backbone) for p in paths]
        return cls(models, [checkpoint_id(p) for p in paths])

    @property
    def id(self):
        return "+".join(self.ids)

    @property
    def input_size(self):
        return self.models[0].backbone.spec.input_size

    def predict(self, ref, dist, tta=None):
        return float(np.mean([predict_fr(m.eval(), ref, dist, tta) for m in self.models]))


def _as_teacher(teacher):
    if isinstance(teacher, Teacher):
        return teacher
    if isinstance(teacher, (list, tuple)):
        return Teacher(teacher)
    return Teacher([teacher])


def pseudo_label(teacher, unlabeled: Sequence[SampleRecord], tta=True, loader=load_image,
                 keep: Optional[Callable[[SampleRecord], bool]] = None):
    """Annotate unlabeled pairs with teacher scores on the raw MOS scale.

    ``tta`` may be a bool or a TTASpec. Unreadable pairs are skipped and
    listed in the report. ``keep`` is an optional confidence filter applied
    to each labeled record; it is off by default.
    """
    teacher = _as_teacher(teacher)
    for rec in unlabeled:
        if not rec.ref_path:
            raise MissingReference(f"pseudo-labeling needs a reference for {rec.dist_path}")
    spec = tta if isinstance(tta, TTASpec) else (TTASpec(crop_size=teacher.input_size) if tta else None)
    report = PseudoLabelReport(n_unlabeled_in=len(unlabeled), teacher_id=teacher.id)
    out = []
    for rec in unlabeled:
        try:
            ref, dist = loader(rec.ref_path), loader(rec.dist_path)
        except (OSError, MissingFile) as exc:
            log.warning("skipping unreadable pair %s: %s", rec.dist_path, exc)
            report.skipped.append(rec.dist_path)
            continue
        labeled = SampleRecord(dist_path=rec.dist_path, ref_path=rec.ref_path,
                               mos=teacher.predict(ref, dist, spec), is_pseudo=True)
        if keep is None or keep(labeled):
            out.append(labeled)
    report.n_labeled_out = len(out)
    if out:
        scores = np.array([r.mos for r in out])
        report.score_min, report.score_mean, report.score_max = (float(scores.min()), float(scores.mean()),
                                                                 float(scores.max()))
    return out, report


def extend_dataset(original: Sequence[SampleRecord], pseudo: Sequence[SampleRecord]):
    seen = set()
    for rec in list(original) + list(pseudo):
        key = os.path.normcase(os.path.abspath(rec.dist_path))
        if key in seen:
            raise DuplicateDistortedPath(f"distorted image listed twice: {rec.dist_path}")
        seen.add(key)
    return list(original) + list(pseudo)


# ---------------------------------------------------------------- pipeline

@dataclass
class NoisyStudentConfig:
    labeled: str
    unlabeled: str
    out_dir: str
    manifest_format: str = "csv"
    ref_dir: Optional[str] = None
    dist_dir: Optional[str] = None
    backbone: BackboneSpec = field(default_factory=tiny_backbone_spec)
    conformer: ConformerConfig = field(default_factory=tiny_config)
    teacher_train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, batch_size=4, epochs=3,
                                                                           swa=SWAConfig(True, 2)))
    teacher_aug: Optional[AugmentationSpec] = None
    teacher_checkpoints: Sequence[str] = ()
    student: StudentSpec = field(default_factory=StudentSpec)
    student_train: TrainConfig = field(default_factory=lambda: nr_train_config(lr=1e-3, batch_size=4, epochs=3))
    student_aug: Optional[AugmentationSpec] = None
    extra_augs: bool = True
    pseudo_tta: bool = True
    eval_crops: int = 4
    val_fraction: float = 0.2
    seed: int = 0
    allow_random_backbone: bool = False
    resume: bool = True


@dataclass
class NoisyStudentResult:
    state: object
    report: object
    pseudo_report: PseudoLabelReport
    artifacts: dict


def student_augmentation(cfg: NoisyStudentConfig):
    crop = cfg.student.input_size
    aug = cfg.student_aug or (extra_augmentation(crop) if cfg.extra_augs else base_augmentation(crop))
    if not cfg.extra_augs:
        aug = dataclasses.replace(aug, cutout=CutOut(enabled=False), color_jitter=ColorJitter())
    return aug


class _Stage:
    def __init__(self, name, prov):
        self.name = name
        self.prov = prov

    def __enter__(self):
        self.t0 = time.time()
        self.prov["stages"][self.name] = {}
        log.info("stage %s", self.name)
        return self

    def __exit__(self, typ, exc, tb):
        self.prov["stages"][self.name]["seconds"] = round(time.time() - self.t0, 3)
        if exc is not None and not isinstance(exc, StageError):
            self.prov["stages"][self.name]["error"] = f"{type(exc).__name__}: {exc}"
            raise StageError(self.name, exc) from exc
        return False


def _write_json(obj, path):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=str)
    os.replace(tmp, path)


def _file_entry(path):
    return {"path": os.path.abspath(path), "sha256": file_sha256(path)}


def run_noisy_student(cfg: NoisyStudentConfig) -> NoisyStudentResult:
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    paths = {
        "train_manifest": os.path.join(out, "train_manifest.csv"),
        "val_manifest": os.path.join(out, "val_manifest.csv"),
        "teacher_dir": os.path.join(out, "teacher"),
        "teacher_final": os.path.join(out, "teacher", "final.pt"),
        "pseudo_labels": os.path.join(out, "pseudo_labels.csv"),
        "extended_manifest": os.path.join(out, "extended_manifest.csv"),
        "student_dir": os.path.join(out, "student"),
        "student_predictions": os.path.join(out, "student_predictions.csv"),
        "eval_report": os.path.join(out, "eval_report.json"),
        "provenance": os.path.join(out, "provenance.json"),
    }
    prov = {"toolkit_version": __version__, "python": platform.python_version(), "torch": torch.__version__,
            "seed": cfg.seed, "config": _plain(cfg), "stages": {}, "status": "running"}
    try:
        with _Stage("split", prov):
            kw = {"ref_dir": cfg.ref_dir, "dist_dir": cfg.dist_dir} if cfg.manifest_format == "pipal" else {}
            labeled = load_manifest(cfg.labeled, cfg.manifest_format, **kw)
            unlabeled = load_manifest(cfg.unlabeled)
            train, val = split_train_val(labeled, cfg.val_fraction, seed=cfg.seed)
            save_manifest(train, paths["train_manifest"])
            save_manifest(val, paths["val_manifest"])
            prov["stages"]["split"].update(
                inputs={"labeled": _file_entry(cfg.labeled), "unlabeled": _file_entry(cfg.unlabeled)},
                n_train=len(train), n_val=len(val), n_unlabeled=len(unlabeled))

        with _Stage("teacher", prov):
            if cfg.teacher_checkpoints:
                teacher_paths = list(cfg.teacher_checkpoints)
                source = "supplied"
            elif cfg.resume and os.path.exists(paths["teacher_final"]):
                teacher_paths = [paths["teacher_final"]]
                source = "resumed"
            else:
                state = train_fr(train, cfg.backbone, cfg.conformer, cfg.teacher_train, paths["teacher_dir"],
                                 aug=cfg.teacher_aug, allow_random_backbone=cfg.allow_random_backbone)
                shutil.copyfile(state.final_checkpoint, paths["teacher_final"] + ".tmp")
                os.replace(paths["teacher_final"] + ".tmp", paths["teacher_final"])
                teacher_paths = [paths["teacher_final"]]
                source = "trained"
            teacher = Teacher.from_checkpoints(teacher_paths, cfg.allow_random_backbone)
            prov["stages"]["teacher"].update(source=source, seed=cfg.teacher_train.seed,
                                             checkpoints=[_file_entry(p) for p in teacher_paths])

        with _Stage("pseudo", prov):
            pseudo, preport = pseudo_label(teacher, unlabeled, tta=cfg.pseudo_tta)
            save_manifest(pseudo, paths["pseudo_labels"])
            prov["stages"]["pseudo"].update(report=dataclasses.asdict(preport),
                                            output=_file_entry(paths["pseudo_labels"]))

        with _Stage("extend", prov):
            extended = extend_dataset(train, pseudo)
            save_manifest(extended, paths["extended_manifest"])
            prov["stages"]["extend"].update(n_rows=len(extended), output=_file_entry(paths["extended_manifest"]))

        with _Stage("student", prov):
            aug = student_augmentation(cfg)
            sstate = train_nr(extended, cfg.student, cfg.student_train, aug, paths["student_dir"])
            prov["stages"]["student"].update(seed=cfg.student_train.seed, extra_augs=cfg.extra_augs,
                                             augmentation=_plain(aug),
                                             checkpoint=_file_entry(sstate.final_checkpoint))

        with _Stage("evaluate", prov):
            student_model = model_from_checkpoint(sstate.final_checkpoint)
            preds = predict_records(student_model, val, kind="nr", nr_crops=cfg.eval_crops, seed=cfg.seed)
            save_prediction_table(preds, paths["student_predictions"])
            tag = "extra" if cfg.extra_augs else "base"
            report = evaluate(preds, labels_by_id(val), name=f"student[augs={tag}]", strict=False)
            report.to_json(paths["eval_report"])
            prov["stages"]["evaluate"].update(metrics=report.metrics(), output=_file_entry(paths["eval_report"]))
        prov["status"] = "ok"
    except StageError:
        prov["status"] = "failed"
        raise
    finally:
        _write_json(prov, paths["provenance"])

    artifacts = {k: v for k, v in paths.items() if not k.endswith("_dir")}
    artifacts["student_checkpoint"] = sstate.final_checkpoint
    return NoisyStudentResult(sstate, report, preport, artifacts)
