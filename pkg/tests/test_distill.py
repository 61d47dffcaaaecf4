import json
import os
import shutil

import numpy as np
import pytest
import torch
from torch import nn

from iqa_lab.checkpoint import load_checkpoint
from iqa_lab.data import SampleRecord, load_manifest, save_manifest
from iqa_lab.data.synthetic import make_desk_dataset
from iqa_lab.distill import (NoisyStudentConfig, Teacher, extend_dataset, pseudo_label,
                             run_noisy_student)
from iqa_lab.errors import DuplicateDistortedPath, MissingReference, StageError
from iqa_lab.evaluation import EvalReport
from iqa_lab.inference import load_prediction_table


class ConstModel(nn.Module):
    def __init__(self, value, size=8):
        super().__init__()
        self.value = value
        self.backbone = type("B", (), {"spec": type("S", (), {"input_size": size})})()

    def forward(self, ref, dist):
        return torch.full((ref.shape[0],), float(self.value))


def _zeros(path):
    return np.zeros((8, 8, 3), dtype=np.float32)


def _unlabeled(n, prefix="u"):
    return [SampleRecord(dist_path=f"/x/{prefix}{i}.png", ref_path="/x/ref.png") for i in range(n)]


def test_pseudo_label_empty():
    out, rep = pseudo_label(ConstModel(0.0), [], tta=False)
    assert out == [] and rep.n_unlabeled_in == rep.n_labeled_out == 0
    assert rep.score_mean == 0.0


def test_pseudo_label_scale_and_raw_storage():
    out, rep = pseudo_label(ConstModel(1.0), _unlabeled(2000), tta=False, loader=_zeros)
    assert len(out) == rep.n_labeled_out == 2000
    assert all(r.is_pseudo and r.mos == pytest.approx(1448.96 + 121.53) for r in out)
    grown = extend_dataset([SampleRecord(f"/o/{i}.png", "/o/r.png", 1400.0) for i in range(23200)], out)
    assert len(grown) == 25200


def test_pseudo_label_ensemble_is_member_mean():
    out, _ = pseudo_label(Teacher([ConstModel(1.0), ConstModel(-0.5)]), _unlabeled(3), tta=True, loader=_zeros)
    assert all(r.mos == pytest.approx(1448.96 + 0.25 * 121.53) for r in out)


def test_pseudo_label_errors_and_skips(tmp_path):
    with pytest.raises(MissingReference):
        pseudo_label(ConstModel(0.0), [SampleRecord(dist_path="/x/a.png")], tta=False)

    def flaky(path):
        if path.endswith("u1.png"):
            raise OSError("unreadable")
        return _zeros(path)

    out, rep = pseudo_label(ConstModel(0.0), _unlabeled(3), tta=False, loader=flaky)
    assert rep.n_labeled_out == 2 < rep.n_unlabeled_in == 3
    assert rep.skipped == ["/x/u1.png"]


def test_pseudo_label_threshold_hook():
    keep = lambda r: r.mos > 1500
    out, rep = pseudo_label(Teacher([ConstModel(0.0)]), _unlabeled(4), tta=False, loader=_zeros, keep=keep)
    assert out == [] and rep.n_labeled_out == 0


def test_extend_dataset():
    orig = [SampleRecord("/a/1.png", "/a/r.png", 1400.0), SampleRecord("/a/2.png", "/a/r.png", 1500.0)]
    assert extend_dataset(orig, []) == orig
    pseudo = [SampleRecord("/b/1.png", "/a/r.png", 1450.0, is_pseudo=True)]
    ext = extend_dataset(orig, pseudo)
    assert ext[:2] == orig and ext[2].is_pseudo and len(ext) == 3
    with pytest.raises(DuplicateDistortedPath):
        extend_dataset(orig, [SampleRecord("/a/2.png", "/a/r.png", 1.0, is_pseudo=True)])
    with pytest.raises(DuplicateDistortedPath):
        extend_dataset(orig, pseudo + pseudo)


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    lab, unl = make_desk_dataset(str(root), n_refs=5, n_labeled=20, n_unlabeled=10, size=72, seed=0)
    return str(root), lab, unl


def _run(desk, out, **kw):
    _, lab, unl = desk
    return run_noisy_student(NoisyStudentConfig(labeled=lab, unlabeled=unl, out_dir=str(out), **kw))


def test_pipeline_end_to_end(desk, tmp_path):
    res = _run(desk, tmp_path / "run")
    art = res.artifacts
    for key, path in art.items():
        assert os.path.exists(path), key
    train = load_manifest(art["train_manifest"])
    ext = load_manifest(art["extended_manifest"])
    assert len(ext) == len(train) + 10
    assert ext[:len(train)] == train
    assert sum(r.is_pseudo for r in ext) == 10
    assert load_checkpoint(art["student_checkpoint"])["kind"] == "nr_student"
    rep = EvalReport.from_json(art["eval_report"])
    assert rep.n == len(load_manifest(art["val_manifest"])) and rep.name == "student[augs=extra]"
    assert set(load_prediction_table(art["student_predictions"])) == {os.path.basename(r.dist_path)
                                                                       for r in load_manifest(art["val_manifest"])}
    prov = json.load(open(art["provenance"]))
    assert prov["status"] == "ok"
    assert set(prov["stages"]) == {"split", "teacher", "pseudo", "extend", "student", "evaluate"}
    assert len(prov["stages"]["teacher"]["checkpoints"][0]["sha256"]) == 64
    assert prov["stages"]["pseudo"]["report"]["n_labeled_out"] == 10


def test_pipeline_reproducible_and_resumable(desk, tmp_path):
    a = _run(desk, tmp_path / "a")
    b = _run(desk, tmp_path / "b")
    pa = load_manifest(a.artifacts["pseudo_labels"])
    pb = load_manifest(b.artifacts["pseudo_labels"])
    assert [r.mos for r in pa] == [r.mos for r in pb]
    # second run in the same directory reuses the teacher
    c = _run(desk, tmp_path / "a")
    prov = json.load(open(c.artifacts["provenance"]))
    assert prov["stages"]["teacher"]["source"] == "resumed"
    assert [r.mos for r in load_manifest(c.artifacts["pseudo_labels"])] == [r.mos for r in pa]


def test_pipeline_augmentation_ablation(desk, tmp_path):
    on = _run(desk, tmp_path / "on", extra_augs=True)
    off = _run(desk, tmp_path / "off", extra_augs=False)
    assert on.report.name != off.report.name
    p_on = json.load(open(on.artifacts["provenance"]))["stages"]["student"]
    p_off = json.load(open(off.artifacts["provenance"]))["stages"]["student"]
    assert p_on["augmentation"]["cutout"]["enabled"] and not p_off["augmentation"]["cutout"]["enabled"]


def test_identical_pairs_give_identical_pseudo_labels(desk, tmp_path):
    root, lab, unl = desk
    src = load_manifest(lab)[0].ref_path
    recs = []
    for i in range(3):
        p = str(tmp_path / f"copy{i}.png")
        shutil.copyfile(src, p)
        recs.append(SampleRecord(dist_path=p, ref_path=src))
    res = _run(desk, tmp_path / "run")
    teacher = Teacher.from_checkpoints([res.artifacts["teacher_final"]])
    out, _ = pseudo_label(teacher, recs, tta=True)
    assert len({r.mos for r in out}) == 1


def test_stage_failure_names_stage(desk, tmp_path):
    _, lab, unl = desk
    bad = [SampleRecord(dist_path=r.dist_path) for r in load_manifest(unl)]
    bad_path = str(tmp_path / "bad_unlabeled.csv")
    save_manifest(bad, bad_path)
    with pytest.raises(StageError) as exc:
        run_noisy_student(NoisyStudentConfig(labeled=lab, unlabeled=bad_path, out_dir=str(tmp_path / "run")))
    assert exc.value.stage == "pseudo" and exc.value.exit_code == 3
    prov = json.load(open(tmp_path / "run" / "provenance.json"))
    assert prov["status"] == "failed" and "MissingReference" in prov["stages"]["pseudo"]["error"]
    # partial artifacts from earlier stages are kept
    assert os.path.exists(tmp_path / "run" / "teacher" / "final.pt")
