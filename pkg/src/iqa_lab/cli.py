"""``iqa-lab`` command-line entry point.

Every command writes under ``--out-dir`` and finishes by writing
``outputs.json``, a list of the files it produced with their sha256. On
failure a single JSON line goes to stderr and the exit code is 2 (config),
3 (data) or 4 (numeric).
"""
import argparse
import csv
import json
import logging
import os
import sys
import time

import yaml

from . import __version__
from .checkpoint import _plain, file_sha256, load_checkpoint, model_from_checkpoint
from .config import config_to_dict, load_config, validate_inputs
from .errors import ConfigError, IQAError
from .evaluation import EvalReport, comparison_table, evaluate, labels_by_id, scatter_rows

log = logging.getLogger("iqa_lab")

OUTPUTS_MANIFEST = "outputs.json"


class Outputs:
    """Collects produced files and writes the outputs manifest."""

    def __init__(self, out_dir, command, cfg=None):
        self.out_dir = os.path.abspath(out_dir)
        self.command = command
        self.cfg = cfg
        self.files = []

    def path(self, *parts):
        p = os.path.join(self.out_dir, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def add(self, *paths):
        for p in paths:
            if os.path.isdir(p):
                for root, _, names in os.walk(p):
                    self.files.extend(os.path.join(root, n) for n in sorted(names))
            elif os.path.exists(p):
                self.files.append(p)

    def write(self):
        os.makedirs(self.out_dir, exist_ok=True)
        if self.cfg is not None:
            cfg_path = os.path.join(self.out_dir, "config.yaml")
            with open(cfg_path, "w", encoding="utf-8") as f:
                yaml.safe_dump(config_to_dict(self.cfg), f, sort_keys=True)
            self.add(cfg_path)
        seen, entries = set(), []
        for p in self.files:
            p = os.path.abspath(p)
            if p in seen or p.endswith(OUTPUTS_MANIFEST):
                continue
            seen.add(p)
            entries.append({"path": os.path.relpath(p, self.out_dir), "bytes": os.path.getsize(p),
                            "sha256": file_sha256(p)})
        doc = {"command": self.command, "toolkit_version": __version__, "created": time.time(),
               "files": sorted(entries, key=lambda e: e["path"])}
        tmp = os.path.join(self.out_dir, OUTPUTS_MANIFEST + ".tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2)
        os.replace(tmp, os.path.join(self.out_dir, OUTPUTS_MANIFEST))
        return doc


def _print_plan(command, out_dir, steps, outputs):
    print(json.dumps({"command": command, "dry_run": True, "out_dir": os.path.abspath(out_dir),
                      "steps": steps, "outputs": outputs}, indent=2))
    return 0


def _records(path, cfg, check_files=True):
    from .data.manifest import load_manifest
    kw = {}
    if cfg.data.format == "pipal" and path == cfg.data.labeled:
        kw = {"format": "pipal", "ref_dir": cfg.data.ref_dir, "dist_dir": cfg.data.dist_dir}
    return load_manifest(path, check_files=check_files, **kw)


def _train_val(cfg):
    from .data.manifest import split_train_val
    labeled = _records(cfg.data.labeled, cfg)
    if cfg.data.val:
        return labeled, _records(cfg.data.val, cfg)
    if cfg.data.val_fraction > 0:
        return split_train_val(labeled, cfg.data.val_fraction, seed=cfg.seed)
    return labeled, []


# ---------------------------------------------------------------- commands

def cmd_train_fr(cfg, args):
    from .data.manifest import save_manifest
    from .inference import predict_records, save_prediction_table
    from .training import train_fr
    bspec = cfg.backbone.spec()
    if args.dry_run:
        return _print_plan("train-fr", cfg.out_dir, [
            f"load {cfg.data.labeled} and split off validation (fraction {cfg.data.val_fraction})",
            f"build frozen {bspec.kind} backbone, conformer head L={cfg.conformer.num_blocks} D={cfg.conformer.dim}",
            f"train {cfg.train_fr.epochs} epochs, batch {cfg.train_fr.batch_size}, lr {cfg.train_fr.lr}, "
            f"swa={'on' if cfg.train_fr.swa.enabled else 'off'}",
            "predict validation set with enhanced prediction and evaluate"],
            ["train_manifest.csv", "val_manifest.csv", "checkpoints/", "train_log.csv",
             "val_predictions.csv", "eval_report.json"])
    out = Outputs(cfg.out_dir, "train-fr", cfg)
    train, val = _train_val(cfg)
    save_manifest(train, out.path("train_manifest.csv"))
    out.add(out.path("train_manifest.csv"))
    if val:
        save_manifest(val, out.path("val_manifest.csv"))
        out.add(out.path("val_manifest.csv"))
    aug = cfg.augment.spec(bspec.input_size, extra=False)
    state = train_fr(train, bspec, cfg.conformer, cfg.train_fr, cfg.out_dir, aug=aug, val_records=val or None,
                     allow_random_backbone=cfg.backbone.allow_random)
    out.add(os.path.join(cfg.out_dir, "checkpoints"), state.log_path)
    if val:
        model = model_from_checkpoint(state.final_checkpoint, cfg.backbone.allow_random)
        preds = predict_records(model, val, "fr", tta=cfg.tta.spec(bspec.input_size))
        out.add(save_prediction_table(preds, out.path("val_predictions.csv")))
        rep = evaluate(preds, labels_by_id(val), name="fr_teacher", strict=False)
        out.add(rep.to_json(out.path("eval_report.json")))
        print(json.dumps({"final_checkpoint": state.final_checkpoint, **rep.metrics()}))
    else:
        print(json.dumps({"final_checkpoint": state.final_checkpoint}))
    out.write()
    return 0


def cmd_train_nr(cfg, args):
    from .inference import predict_records, save_prediction_table
    from .training import train_nr
    if args.dry_run:
        return _print_plan("train-nr", cfg.out_dir, [
            f"load {cfg.data.labeled} (distorted images and labels only)",
            f"build {cfg.student.kind} student at {cfg.student.input_size}px",
            f"train {cfg.train_nr.epochs} epochs, loss {cfg.train_nr.loss}, "
            f"extra augmentations {'on' if cfg.augment.extra_augs else 'off'}",
            "predict validation set with random-crop averaging and evaluate"],
            ["checkpoints/", "train_log.csv", "val_predictions.csv", "eval_report.json"])
    out = Outputs(cfg.out_dir, "train-nr", cfg)
    train, val = _train_val(cfg)
    aug = cfg.augment.spec(cfg.student.input_size, extra=cfg.augment.extra_augs)
    state = train_nr(train, cfg.student, cfg.train_nr, aug, cfg.out_dir, val_records=val or None)
    out.add(os.path.join(cfg.out_dir, "checkpoints"), state.log_path)
    result = {"final_checkpoint": state.final_checkpoint}
    if val:
        model = model_from_checkpoint(state.final_checkpoint)
        preds = predict_records(model, val, "nr", nr_crops=cfg.tta.nr_crops, seed=cfg.seed)
        out.add(save_prediction_table(preds, out.path("val_predictions.csv")))
        rep = evaluate(preds, labels_by_id(val), name="nr_student", strict=False)
        out.add(rep.to_json(out.path("eval_report.json")))
        result.update(rep.metrics())
    print(json.dumps(result))
    out.write()
    return 0


def cmd_pseudo_label(cfg, args):
    from .data.manifest import save_manifest
    from .distill import Teacher, extend_dataset, pseudo_label
    if args.dry_run:
        steps = [f"load teacher(s) {cfg.pseudo.teacher_checkpoints}",
                 f"score every pair in {cfg.data.unlabeled} (tta={'on' if cfg.pseudo.tta else 'off'})"]
        outputs = ["pseudo_labels.csv", "pseudo_report.json"]
        if cfg.data.labeled:
            steps.append(f"append pseudo-labeled rows to {cfg.data.labeled}")
            outputs.append("extended_manifest.csv")
        return _print_plan("pseudo-label", cfg.out_dir, steps, outputs)
    out = Outputs(cfg.out_dir, "pseudo-label", cfg)
    teacher = Teacher.from_checkpoints(cfg.pseudo.teacher_checkpoints, cfg.backbone.allow_random)
    unlabeled = _records(cfg.data.unlabeled, cfg, check_files=False)
    pseudo, report = pseudo_label(teacher, unlabeled, tta=cfg.pseudo.tta)
    save_manifest(pseudo, out.path("pseudo_labels.csv"))
    out.add(out.path("pseudo_labels.csv"))
    if cfg.data.labeled:
        extended = extend_dataset(_records(cfg.data.labeled, cfg), pseudo)
        save_manifest(extended, out.path("extended_manifest.csv"))
        out.add(out.path("extended_manifest.csv"))
    with open(out.path("pseudo_report.json"), "w", encoding="utf-8") as f:
        json.dump(_plain(report), f, indent=2)
    out.add(out.path("pseudo_report.json"))
    print(json.dumps(_plain(report)))
    out.write()
    return 0


def noisy_student_config(cfg):
    from .distill import NoisyStudentConfig
    return NoisyStudentConfig(
        labeled=cfg.data.labeled, unlabeled=cfg.data.unlabeled, out_dir=cfg.out_dir,
        manifest_format=cfg.data.format, ref_dir=cfg.data.ref_dir, dist_dir=cfg.data.dist_dir,
        backbone=cfg.backbone.spec(), conformer=cfg.conformer, teacher_train=cfg.train_fr,
        teacher_aug=cfg.augment.spec(cfg.backbone.spec().input_size, extra=False),
        teacher_checkpoints=tuple(cfg.pseudo.teacher_checkpoints), student=cfg.student,
        student_train=cfg.train_nr,
        student_aug=cfg.augment.spec(cfg.student.input_size, extra=cfg.augment.extra_augs),
        extra_augs=cfg.augment.extra_augs, pseudo_tta=cfg.pseudo.tta, eval_crops=cfg.tta.nr_crops,
        val_fraction=cfg.data.val_fraction, seed=cfg.seed,
        allow_random_backbone=cfg.backbone.allow_random)


def cmd_noisy_student(cfg, args):
    from .distill import run_noisy_student
    ns = noisy_student_config(cfg)
    if args.dry_run:
        teacher = (f"use supplied teacher(s) {list(ns.teacher_checkpoints)}" if ns.teacher_checkpoints
                   else f"train FR teacher for {ns.teacher_train.epochs} epochs (reused if teacher/final.pt exists)")
        return _print_plan("noisy-student", cfg.out_dir, [
            f"split {ns.labeled} into train/val (fraction {ns.val_fraction}, grouped by reference)",
            teacher,
            f"pseudo-label {ns.unlabeled}",
            "extend the training manifest with the pseudo-labeled rows",
            f"train NR student for {ns.student_train.epochs} epochs "
            f"(extra augmentations {'on' if ns.extra_augs else 'off'})",
            "evaluate the student on the validation split"],
            ["train_manifest.csv", "val_manifest.csv", "teacher/", "pseudo_labels.csv",
             "extended_manifest.csv", "student/", "student_predictions.csv", "eval_report.json",
             "provenance.json"])
    out = Outputs(cfg.out_dir, "noisy-student", cfg)
    try:
        res = run_noisy_student(ns)
    finally:
        out.add(cfg.out_dir)
        out.write()
    print(json.dumps({"pseudo_labels": res.pseudo_report.n_labeled_out, **res.report.metrics()}))
    return 0


def cmd_predict(cfg, args):
    from .inference import ensemble_scores, predict_records, save_prediction_table
    ckpts = cfg.predict.checkpoints
    if args.dry_run:
        outputs = ["predictions.csv"] + ([f"predictions_{i}.csv" for i in range(len(ckpts))] if len(ckpts) > 1 else [])
        return _print_plan("predict", cfg.out_dir, [
            f"load {len(ckpts)} checkpoint(s)",
            f"score every row of {cfg.predict.manifest}",
            "fuse member tables" if len(ckpts) > 1 else "write the table"], outputs)
    out = Outputs(cfg.out_dir, "predict", cfg)
    records = _records(cfg.predict.manifest, cfg)
    tables = []
    for i, path in enumerate(ckpts):
        kind = load_checkpoint(path)["kind"]
        model = model_from_checkpoint(path, cfg.backbone.allow_random)
        if kind == "fr_teacher":
            preds = predict_records(model, records, "fr", tta=cfg.tta.spec(model.backbone.spec.input_size))
        else:
            preds = predict_records(model, records, "nr", nr_crops=cfg.tta.nr_crops, seed=cfg.seed)
        tables.append(preds)
        if len(ckpts) > 1:
            out.add(save_prediction_table(preds, out.path(f"predictions_{i}.csv")))
    final = tables[0] if len(tables) == 1 else ensemble_scores(tables, cfg.predict.weights)
    out.add(save_prediction_table(final, out.path("predictions.csv")))
    print(json.dumps({"predictions": out.path("predictions.csv"), "n": len(final)}))
    out.write()
    return 0


def cmd_evaluate(args):
    from .data.manifest import load_manifest
    from .inference import load_prediction_table
    if args.dry_run:
        return _print_plan("evaluate", args.out_dir or ".", [
            f"correlate {args.predictions} against {args.labels}"], ["eval_report.json"])
    preds = load_prediction_table(args.predictions)
    labels = labels_by_id(load_manifest(args.labels, args.labels_format, check_files=False))
    name = args.name or os.path.splitext(os.path.basename(args.predictions))[0]
    rep = evaluate(preds, labels, name=name)
    print(json.dumps({"name": rep.name, "n": rep.n, **rep.metrics()}))
    if args.out_dir:
        out = Outputs(args.out_dir, "evaluate")
        out.add(rep.to_json(out.path("eval_report.json")))
        out.write()
    return 0


def cmd_report(args):
    if args.dry_run:
        return _print_plan("report", args.out_dir, [f"tabulate {len(args.reports)} report(s)"],
                           ["comparison.md", "comparison.csv", "scatter.csv"] + (["scatter.png"] if args.plot else []))
    reports = [EvalReport.from_json(p) for p in args.reports]
    out = Outputs(args.out_dir, "report")
    table = comparison_table(reports)
    for name, text in (("comparison.md", table), ("comparison.csv", comparison_table(reports, "csv"))):
        with open(out.path(name), "w", encoding="utf-8") as f:
            f.write(text)
        out.add(out.path(name))
    with open(out.path("scatter.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["method", "image_id", "predicted", "mos"])
        w.writerows(scatter_rows(reports))
    out.add(out.path("scatter.csv"))
    if args.plot:
        from .plot import scatter_plot
        out.add(scatter_plot(reports, out.path("scatter.png")))
    sys.stdout.write(table)
    out.write()
    return 0


def cmd_make_desk_data(args):
    from .data.synthetic import make_desk_dataset
    if args.dry_run:
        return _print_plan("make-desk-data", args.out_dir, [
            f"write {args.n_refs} references, {args.n_labeled} labeled and {args.n_unlabeled} unlabeled "
            f"distortions at {args.size}px (seed {args.seed})"], ["ref/", "dist/", "unlabeled/",
                                                               "labeled.csv", "unlabeled.csv"])
    lab, unl = make_desk_dataset(args.out_dir, args.n_refs, args.n_labeled, args.n_unlabeled, args.size,
                                 args.seed)
    out = Outputs(args.out_dir, "make-desk-data")
    out.add(args.out_dir)
    out.write()
    print(json.dumps({"labeled": lab, "unlabeled": unl}))
    return 0


def cmd_count_params(cfg, args):
    from .params import format_report, parameter_count_report
    conformer = cfg.conformer if args.config else None
    report = parameter_count_report(conformer)
    text = format_report(report)
    print(text)
    if args.out_dir and not args.dry_run:
        out = Outputs(args.out_dir, "count-params")
        with open(out.path("param_report.json"), "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2)
        with open(out.path("param_report.txt"), "w", encoding="utf-8") as f:
            f.write(text + "\n")
        out.add(out.path("param_report.json"), out.path("param_report.txt"))
        out.write()
    return 0


CONFIG_COMMANDS = {
    "train-fr": cmd_train_fr,
    "train-nr": cmd_train_nr,
    "pseudo-label": cmd_pseudo_label,
    "noisy-student": cmd_noisy_student,
    "predict": cmd_predict,
    "count-params": cmd_count_params,
}


def build_parser():
    p = argparse.ArgumentParser(prog="iqa-lab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out-dir", default=None)
        sp.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
        return sp

    common(sub.add_parser("train-fr", help="train the full-reference teacher"))
    common(sub.add_parser("train-nr", help="train a blind student on labeled distorted images"))
    common(sub.add_parser("pseudo-label", help="score unlabeled pairs with teacher checkpoints"))
    common(sub.add_parser("noisy-student", help="run teacher -> pseudo-labels -> student end to end"))
    common(sub.add_parser("predict", help="write a prediction table, fusing several checkpoints"))
    common(sub.add_parser("count-params", help="per-layer parameter report against the reference total"))

    ev = common(sub.add_parser("evaluate", help="PLCC/SRCC/KRCC/main score of a prediction table"), config=False)
    ev.add_argument("--predictions", required=True)
    ev.add_argument("--labels", required=True, help="labels manifest")
    ev.add_argument("--labels-format", default="csv", choices=("csv", "pipal"))
    ev.add_argument("--name", default=None)

    rp = common(sub.add_parser("report", help="comparison table and scatter data from eval reports"), config=False)
    rp.add_argument("reports", nargs="+")
    rp.add_argument("--plot", action="store_true", help="also render scatter.png (needs matplotlib)")

    dd = common(sub.add_parser("make-desk-data", help="write the synthetic desk dataset"), config=False)
    dd.add_argument("--n-refs", type=int, default=5)
    dd.add_argument("--n-labeled", type=int, default=20)
    dd.add_argument("--n-unlabeled", type=int, default=10)
    dd.add_argument("--size", type=int, default=72)
    return p


def _fail(exc, code):
    category = getattr(exc, "category", "internal")
    line = json.dumps({"error": category, "type": type(exc).__name__, "exit_code": code,
                       "message": " ".join(str(exc).split())})
    print(line, file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in CONFIG_COMMANDS:
            cfg = load_config(args.config, seed=args.seed, out_dir=args.out_dir)
            validate_inputs(cfg, args.command)
            return CONFIG_COMMANDS[args.command](cfg, args)
        if args.command in ("report", "make-desk-data") and not args.out_dir:
            raise ConfigError(f"{args.command} needs --out-dir")
        if args.seed is None:
            args.seed = 0
        return {"evaluate": cmd_evaluate, "report": cmd_report, "make-desk-data": cmd_make_desk_data}[args.command](args)
    except IQAError as exc:
        return _fail(exc, exc.exit_code)
    except ValueError as exc:
        # constructor validation outside the config loader
        return _fail(exc, ConfigError.exit_code)
    except OSError as exc:
        return _fail(exc, 3)
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
