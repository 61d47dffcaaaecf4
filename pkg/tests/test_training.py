import csv
import logging
import os

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn
from torch.utils.data import DataLoader

from iqa_lab.backbone import build_backbone, tiny_backbone_spec
from iqa_lab.checkpoint import load_checkpoint, model_from_checkpoint
from iqa_lab.conformer import IQAConformer, tiny_config
from iqa_lab.data import SampleRecord, identity_augmentation, load_manifest
from iqa_lab.data.synthetic import make_desk_dataset
from iqa_lab.datasets import FRPairDataset, NRDataset
from iqa_lab.errors import ConfigError, DataError, LengthMismatch, NonFiniteLoss, ShapeMismatch
from iqa_lab.student import StudentSpec
from iqa_lab.training import (PlateauConfig, SWAAccumulator, SWAConfig, TrainConfig, loss_mse,
                              loss_mse_pearson, make_plateau, nr_train_config, recompute_bn,
                              swa_average, total_steps, train_fr, train_nr)

from oracles import central_difference_grad, pearson_loop

T = lambda *v: torch.tensor(v, dtype=torch.float64)


# ---------------------------------------------------------------- losses

def test_mse_examples():
    assert loss_mse(T(0, 0), T(1, 3)).item() == 5.0
    x = T(1.5, -2.0, 0.25)
    assert loss_mse(x, x).item() == 0.0
    p, t = T(0.3, 1.2, -0.7), T(1.0, -1.0, 0.5)
    assert loss_mse(3 * p, 3 * t).item() == pytest.approx(9 * loss_mse(p, t).item(), rel=1e-12)
    with pytest.raises(LengthMismatch):
        loss_mse(T(1, 2), T(1, 2, 3))
    with pytest.raises(LengthMismatch):
        loss_mse(T(), T())


def test_mse_pearson_examples():
    t = T(-1.5, -0.5, 0.5, 1.5)
    assert loss_mse_pearson(t, t).item() == pytest.approx(0.0, abs=1e-15)
    mse_oracle = sum((-a - a) ** 2 for a in t.tolist()) / 4
    assert loss_mse_pearson(-t, t).item() == pytest.approx(mse_oracle + 2.0, abs=1e-12)


def test_mse_pearson_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p, t = rng.normal(size=7), rng.normal(size=7)
        expected = np.mean((p - t) ** 2) + 1 - pearson_loop(list(p), list(t))
        assert loss_mse_pearson(torch.from_numpy(p), torch.from_numpy(t)).item() == pytest.approx(expected, abs=1e-12)


def test_mse_pearson_constant_target_fallback(caplog):
    p, t = T(0.1, 0.4, -0.2), T(2.0, 2.0, 2.0)
    with caplog.at_level(logging.WARNING):
        val = loss_mse_pearson(p, t).item()
    assert val == pytest.approx(loss_mse(p, t).item() + 1.0)
    assert "constant target" in caplog.text


def test_mse_pearson_gradient_finite_differences():
    rng = np.random.default_rng(1)
    t = torch.from_numpy(rng.normal(size=5))
    for _ in range(5):
        p0 = rng.normal(size=5)
        p = torch.tensor(p0, requires_grad=True)
        loss_mse_pearson(p, t).backward()
        fd = central_difference_grad(lambda v: loss_mse_pearson(torch.from_numpy(v), t).item(), p0)
        g = p.grad.numpy()
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


def test_mse_pearson_gradient_finite_at_constant_prediction():
    p = torch.zeros(4, dtype=torch.float64, requires_grad=True)
    loss_mse_pearson(p, T(0, 1, 2, 3)).backward()
    assert torch.isfinite(p.grad).all()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=2, max_size=20))
def test_mse_pearson_nonnegative(pairs):
    p, t = (torch.tensor(v, dtype=torch.float64) for v in zip(*pairs))
    assert loss_mse_pearson(p, t).item() >= -1e-12


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(loss="mse_plus_pearson", batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(plateau=PlateauConfig(True, 1.0, 2))
    with pytest.raises(ValueError):
        TrainConfig(loss="l1")


def test_total_steps():
    # drop-last disabled: ceil per epoch
    assert total_steps(23179, 16, 30) == 1449 * 30 == 43470
    assert total_steps(23179, 16, 30, drop_last=True) == 1448 * 30
    assert abs(total_steps(23179, 16, 30) - 43479) / 43479 < 1e-3
    assert total_steps(8, 8, 200) == 200


# ---------------------------------------------------------------- SWA

def _random_sd(rng, shapes):
    return {k: torch.from_numpy(rng.normal(size=s)) for k, s in shapes.items()}


def test_swa_midpoint_and_idempotence():
    a, b = {"w": torch.zeros(3, dtype=torch.float64)}, {"w": torch.full((3,), 2.0, dtype=torch.float64)}
    assert torch.equal(swa_average([a, b])["w"], torch.ones(3, dtype=torch.float64))
    rng = np.random.default_rng(0)
    sd = _random_sd(rng, {"w": (4, 3), "b": (3,)})
    out = swa_average([sd] * 7)
    for k in sd:
        assert torch.equal(out[k], sd[k])


def test_swa_matches_loop_oracle():
    rng = np.random.default_rng(2)
    shapes = {"w": (5, 4), "b": (4,), "g": (2, 3, 3)}
    cks = [_random_sd(rng, shapes) for _ in range(10)]
    out = swa_average(cks)
    acc = SWAAccumulator()
    for sd in cks:
        acc.update(sd)
    assert acc.count == 10
    running = acc.average()
    for k, shape in shapes.items():
        oracle = np.zeros(shape)
        for idx in np.ndindex(shape):
            oracle[idx] = sum(float(sd[k][idx]) for sd in cks) / len(cks)
        np.testing.assert_allclose(out[k].numpy(), oracle, rtol=0, atol=1e-12)
        np.testing.assert_allclose(running[k].numpy(), oracle, rtol=0, atol=1e-12)


def test_swa_errors():
    with pytest.raises(ShapeMismatch):
        swa_average([{"w": torch.zeros(2)}, {"w": torch.zeros(3)}])
    with pytest.raises(ShapeMismatch):
        swa_average([{"w": torch.zeros(2)}, {"v": torch.zeros(2)}])
    with pytest.raises(ValueError):
        swa_average([])


def test_swa_keeps_integer_buffers():
    a = {"n": torch.tensor(3), "w": torch.zeros(1)}
    b = {"n": torch.tensor(5), "w": torch.ones(1)}
    out = swa_average([a, b])
    assert out["n"].item() == 5 and out["w"].item() == 0.5


def test_recompute_bn_gives_data_statistics():
    torch.manual_seed(0)
    bn = nn.BatchNorm1d(3)
    x = torch.randn(40, 3, dtype=torch.float32) * 2 + 1
    loader = DataLoader(list(x), batch_size=10)
    recompute_bn(bn, loader, lambda m, b: m(b))
    torch.testing.assert_close(bn.running_mean, x.mean(0), rtol=0, atol=1e-5)
    assert bn.momentum == 0.1 and bn.training


# ---------------------------------------------------------------- plateau

def _lr_after(metrics, patience=2):
    opt = torch.optim.Adam([nn.Parameter(torch.zeros(1))], lr=1e-3)
    sched = make_plateau(opt, PlateauConfig(True, 0.5, patience))
    for m in metrics:
        sched.step(m)
    return opt.param_groups[0]["lr"]


@pytest.mark.parametrize("patience", [1, 2, 4])
def test_plateau_halves_once(patience):
    # baseline epoch, then `patience + 1` stalled epochs
    assert _lr_after([0.7] * (patience + 2), patience) == 0.5e-3
    assert _lr_after([0.7] * (patience + 1), patience) == 1e-3
    assert _lr_after([0.1 * i for i in range(10)], patience) == 1e-3


# ---------------------------------------------------------------- loops

@pytest.fixture(scope="module")
def desk8(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk8")
    lab, _ = make_desk_dataset(str(root), n_refs=4, n_labeled=8, n_unlabeled=2, size=64, seed=0)
    return load_manifest(lab)


def _fr(records, out, epochs=20, **kw):
    cfg = TrainConfig(lr=1e-3, batch_size=8, epochs=epochs, swa=kw.pop("swa", SWAConfig(False)), seed=0)
    return train_fr(records, tiny_backbone_spec(64), tiny_config(), cfg, str(out),
                    aug=identity_augmentation(64), **kw)


def _fr_eval_mse(model, records):
    ds = FRPairDataset(records, aug=identity_augmentation(64), train=False)
    ref, dist, t = (torch.stack(x) for x in zip(*[ds[i] for i in range(len(ds))]))
    with torch.no_grad():
        return float(((model.eval()(ref, dist) - t) ** 2).mean())


def test_fr_overfit_and_frozen_backbone(desk8, tmp_path):
    state = _fr(desk8, tmp_path / "a", epochs=200)
    assert _fr_eval_mse(state.model, desk8) < 1e-3
    fresh = build_backbone(tiny_backbone_spec(64))
    for k, v in fresh.state_dict().items():
        assert torch.equal(v, state.model.backbone.state_dict()[k])


def test_fr_deterministic_log_and_checkpoints(desk8, tmp_path):
    a = _fr(desk8, tmp_path / "a", epochs=5, swa=SWAConfig(True, 3))
    b = _fr(desk8, tmp_path / "b", epochs=5, swa=SWAConfig(True, 3))
    assert a.step_losses == b.step_losses
    assert [os.path.basename(p) for p in a.checkpoints] == [f"epoch_{e:03d}.pt" for e in range(1, 6)]
    assert a.swa.count == 3 and a.final_checkpoint.endswith("swa.pt")
    with open(a.log_path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "epoch", "loss", "lr", "wall_time"]
    assert len(rows) == 1 + a.step
    assert [float(r[2]) for r in rows[1:]] == a.step_losses
    ckpt = load_checkpoint(a.final_checkpoint)
    assert ckpt["kind"] == "fr_teacher" and ckpt["config"]["conformer"]["dim"] == 16
    assert not any(k.startswith("backbone.") for k in ckpt["state_dict"])


def test_fr_zero_epochs(desk8, tmp_path):
    state = _fr(desk8, tmp_path, epochs=0)
    assert state.step == 0 and len(state.checkpoints) == 1
    torch.manual_seed(0)
    init = IQAConformer(tiny_config(), build_backbone(tiny_backbone_spec(64)))
    loaded = model_from_checkpoint(state.final_checkpoint)
    for k, v in init.head_state_dict().items():
        assert torch.equal(v, loaded.head_state_dict()[k])


def test_checkpoint_roundtrip(desk8, tmp_path):
    state = _fr(desk8, tmp_path, epochs=2)
    loaded = model_from_checkpoint(state.final_checkpoint)
    ds = FRPairDataset(desk8[:2], aug=identity_augmentation(64), train=False)
    ref, dist = torch.stack([ds[0][0], ds[1][0]]), torch.stack([ds[0][1], ds[1][1]])
    with torch.no_grad():
        assert torch.equal(state.model.eval()(ref, dist), loaded(ref, dist))
    bad = load_checkpoint(state.final_checkpoint)
    bad["format_version"] = 99
    torch.save(bad, tmp_path / "bad.pt")
    with pytest.raises(ConfigError):
        load_checkpoint(str(tmp_path / "bad.pt"))


def test_non_finite_loss_aborts(desk8, tmp_path):
    poisoned = [SampleRecord(r.dist_path, r.ref_path, float("nan") if i == 0 else r.mos)
                for i, r in enumerate(desk8)]
    with pytest.raises(NonFiniteLoss, match="epoch 1 step 1"):
        _fr(poisoned, tmp_path, epochs=2)


def _nr(records, out, epochs):
    cfg = nr_train_config(lr=1e-3, batch_size=8, epochs=epochs, seed=0)
    return train_nr(records, StudentSpec(input_size=64), cfg, identity_augmentation(64), str(out))


def test_nr_overfit(desk8, tmp_path):
    state = _nr(desk8, tmp_path, 200)
    ds = NRDataset(desk8, aug=identity_augmentation(64), train=False)
    x, t = (torch.stack(v) for v in zip(*[ds[i] for i in range(len(ds))]))
    with torch.no_grad():
        assert loss_mse_pearson(state.model.eval()(x), t).item() < 1e-2
    # plateau signal was live: lr must have moved off its start value
    assert state.history[-1]["lr"] < 1e-3


def test_nr_deterministic(desk8, tmp_path):
    a = _nr(desk8, tmp_path / "a", 5)
    b = _nr(desk8, tmp_path / "b", 5)
    assert a.step_losses == b.step_losses
    assert load_checkpoint(a.final_checkpoint)["kind"] == "nr_student"


def test_nr_dataset_never_reads_references(desk8):
    opened = []

    def loader(path):
        opened.append(path)
        return np.zeros((64, 64, 3), dtype=np.float32)

    ds = NRDataset(desk8, aug=identity_augmentation(64), loader=loader)
    for i in range(len(ds)):
        ds[i]
    refs = {r.ref_path for r in desk8}
    assert opened and not refs & set(opened)
    with pytest.raises(DataError):
        ds._load(desk8[0].ref_path)
