"""Losses, SWA, schedulers and the FR-teacher / NR-student training loops."""
import csv
import logging
import math
import os
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch
from torch import Tensor, nn
from torch.utils.data import DataLoader

from . import metrics
from .backbone import BackboneSpec, build_backbone
from .checkpoint import save_checkpoint, state_dict_of
from .conformer import ConformerConfig, IQAConformer
from .data.augment import AugmentationSpec, base_augmentation
from .data.manifest import MOSNormalizer
from .datasets import FRPairDataset, NRDataset
from .errors import DataError, DegenerateInput, EmptySplit, LengthMismatch, NonFiniteLoss, ShapeMismatch
from .student import StudentSpec, build_student

log = logging.getLogger(__name__)

LOSSES = ("mse", "mse_plus_pearson")
LOG_FIELDS = ("step", "epoch", "loss", "lr", "wall_time")


@dataclass(frozen=True)
class SWAConfig:
    enabled: bool = True
    last_k_epochs: int = 10


@dataclass(frozen=True)
class PlateauConfig:
    enabled: bool = False
    factor: float = 0.5
    patience: int = 2


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    batch_size: int = 16
    epochs: int = 30
    loss: str = "mse"
    swa: SWAConfig = field(default_factory=SWAConfig)
    plateau: PlateauConfig = field(default_factory=PlateauConfig)
    seed: int = 0
    num_workers: int = 0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.loss == "mse_plus_pearson" and self.batch_size < 2:
            raise ValueError("batch Pearson needs batch_size >= 2")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and lr > 0 required")
        if not 0.0 < self.plateau.factor < 1.0:
            raise ValueError("plateau factor must be in (0, 1)")
        if self.swa.last_k_epochs < 1:
            raise ValueError("swa.last_k_epochs must be >= 1")
        object.__setattr__(self, "betas", tuple(self.betas))


def fr_train_config(**kw):
    return TrainConfig(**kw)


def nr_train_config(**kw):
    base = dict(batch_size=32, epochs=20, loss="mse_plus_pearson",
                swa=SWAConfig(enabled=False), plateau=PlateauConfig(enabled=True))
    base.update(kw)
    return TrainConfig(**base)


def total_steps(n_samples, batch_size, epochs, drop_last=False):
    per_epoch = n_samples // batch_size if drop_last else math.ceil(n_samples / batch_size)
    return per_epoch * epochs


# ---------------------------------------------------------------- losses

def _check_lengths(pred, target, minimum=1):
    if pred.shape != target.shape:
        raise LengthMismatch(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.numel() < minimum:
        raise LengthMismatch(f"need at least {minimum} elements, got {pred.numel()}")


def loss_mse(pred: Tensor, target: Tensor) -> Tensor:
    _check_lengths(pred, target)
    return torch.mean((pred - target) ** 2)


def batch_pearson(pred: Tensor, target: Tensor, eps=1e-12) -> Tensor:
    """Pearson with population moments; clamp inside the sqrt keeps grads finite."""
    p = pred - pred.mean()
    t = target - target.mean()
    cov = (p * t).mean()
    denom = torch.sqrt(((p ** 2).mean() * (t ** 2).mean()).clamp_min(eps))
    return cov / denom


def loss_mse_pearson(pred: Tensor, target: Tensor) -> Tensor:
    """MSE + (1 - Pearson). A constant-target batch takes the full penalty 1."""
    _check_lengths(pred, target)
    mse = loss_mse(pred, target)
    if pred.numel() < 2 or torch.all(target == target.reshape(-1)[0]):
        log.warning("constant target batch of %d; Pearson term set to its maximum penalty", pred.numel())
        return mse + 1.0
    return mse + (1.0 - batch_pearson(pred, target))


LOSS_FNS = {"mse": loss_mse, "mse_plus_pearson": loss_mse_pearson}


# ---------------------------------------------------------------- SWA

def _check_compatible(ref, sd):
    if list(ref.keys()) != list(sd.keys()):
        raise ShapeMismatch("checkpoints have different parameter names")
    for k, v in sd.items():
        if v.shape != ref[k].shape:
            raise ShapeMismatch(f"{k}: {tuple(v.shape)} vs {tuple(ref[k].shape)}")


def swa_average(checkpoints):
    """Elementwise mean of state dicts; integer buffers keep the last value.

    Accumulated as offsets from the first checkpoint, so N identical inputs
    give that checkpoint back exactly.
    """
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    first = checkpoints[0]
    for sd in checkpoints[1:]:
        _check_compatible(first, sd)
    out = OrderedDict()
    n = len(checkpoints)
    for k, v in first.items():
        if v.is_floating_point():
            base = v.to(torch.float64)
            offset = torch.zeros_like(base)
            for sd in checkpoints[1:]:
                offset += sd[k].to(torch.float64) - base
            out[k] = (base + offset / n).to(v.dtype)
        else:
            out[k] = checkpoints[-1][k].clone()
    return out


class SWAAccumulator:
    """Running mean of state dicts, so only one copy is held in memory."""

    def __init__(self):
        self.count = 0
        self.mean = None
        self._dtypes = None

    def update(self, state_dict):
        sd = OrderedDict((k, v.detach().cpu().clone()) for k, v in state_dict.items())
        if self.mean is None:
            self._dtypes = {k: v.dtype for k, v in sd.items()}
            self.mean = OrderedDict((k, v.to(torch.float64) if v.is_floating_point() else v.clone())
                                    for k, v in sd.items())
            self.count = 1
            return
        _check_compatible(self.mean, sd)
        self.count += 1
        for k, v in sd.items():
            if v.is_floating_point():
                self.mean[k] += (v.to(torch.float64) - self.mean[k]) / self.count
            else:
                self.mean[k] = v.clone()

    def average(self):
        if self.mean is None:
            raise ValueError("no checkpoints accumulated")
        return OrderedDict((k, v.to(self._dtypes[k])) for k, v in self.mean.items())


@torch.no_grad()
def recompute_bn(model, loader, forward):
    """Re-estimate trainable BatchNorm running stats with one pass over ``loader``.

    Frozen modules (the backbone) keep their statistics.
    """
    bns = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)
           and any(p.requires_grad for p in m.parameters())]
    if not bns:
        return
    was_training = model.training
    momenta = {}
    for m in bns:
        momenta[m] = m.momentum
        m.reset_running_stats()
        m.momentum = None
    model.train()
    for batch in loader:
        forward(model, batch)
    for m in bns:
        m.momentum = momenta[m]
    model.train(was_training)


def make_plateau(optimizer, cfg: PlateauConfig):
    return torch.optim.lr_scheduler.ReduceLROnPlateau(optimizer, mode="max", factor=cfg.factor,
                                                      patience=cfg.patience)


# ---------------------------------------------------------------- loop

@dataclass
class TrainState:
    model: nn.Module
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    step: int = 0
    swa: SWAAccumulator = field(default_factory=SWAAccumulator)
    step_losses: List[float] = field(default_factory=list)
    history: List[dict] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)
    final_checkpoint: Optional[str] = None
    log_path: Optional[str] = None
    rng_state: Optional[Tensor] = None


class _CSVLog:
    def __init__(self, path):
        self.path = path
        new = not os.path.exists(path) or os.path.getsize(path) == 0
        self.f = open(path, "a", newline="")
        self.w = csv.writer(self.f)
        if new:
            self.w.writerow(LOG_FIELDS)

    def row(self, *vals):
        self.w.writerow(vals)

    def close(self):
        self.f.close()


def _fr_forward(model, batch):
    ref, dist, _ = batch
    return model(ref, dist)


def _nr_forward(model, batch):
    return model(batch[0])


def _predict_all(model, loader, forward):
    model.eval()
    preds, targets = [], []
    with torch.no_grad():
        for batch in loader:
            preds.append(forward(model, batch))
            targets.append(batch[-1])
    return torch.cat(preds).numpy().astype(np.float64), torch.cat(targets).numpy().astype(np.float64)


def evaluate_loss(model, dataset, cfg: TrainConfig, forward):
    loader = DataLoader(dataset, batch_size=max(len(dataset), 1), shuffle=False)
    p, t = _predict_all(model, loader, forward)
    return float(LOSS_FNS[cfg.loss](torch.from_numpy(p), torch.from_numpy(t)))


def _val_metrics(model, loader, forward):
    p, t = _predict_all(model, loader, forward)
    out = {"val_mse": float(np.mean((p - t) ** 2))}
    try:
        out["val_main_score"] = metrics.main_score(p, t)
    except DegenerateInput:
        out["val_main_score"] = float("nan")
    return out


def _fit(model, train_ds, cfg: TrainConfig, forward, out_dir, kind, config_echo, normalizer,
         val_ds=None):
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas)
    scheduler = make_plateau(optimizer, cfg.plateau) if cfg.plateau.enabled else None
    state = TrainState(model, optimizer, log_path=os.path.join(out_dir, "train_log.csv"))
    loss_fn = LOSS_FNS[cfg.loss]
    gen = torch.Generator().manual_seed(cfg.seed)
    loader = DataLoader(train_ds, batch_size=cfg.batch_size, shuffle=True, generator=gen,
                        num_workers=cfg.num_workers, drop_last=False)
    val_loader = None if val_ds is None else DataLoader(val_ds, batch_size=cfg.batch_size, shuffle=False)
    echo = dict(config_echo, train=cfg)

    def ckpt(name, epoch):
        path = os.path.join(out_dir, "checkpoints", name)
        save_checkpoint(path, model, kind, echo, epoch=epoch, step=state.step, normalizer=normalizer)
        return path

    if cfg.epochs == 0:
        state.final_checkpoint = ckpt("epoch_000.pt", 0)
        state.checkpoints.append(state.final_checkpoint)
        state.rng_state = torch.get_rng_state()
        return state

    logger = _CSVLog(state.log_path)
    t0 = time.time()
    swa_start = cfg.epochs - cfg.swa.last_k_epochs + 1
    try:
        for epoch in range(1, cfg.epochs + 1):
            train_ds.set_epoch(epoch)
            model.train()
            epoch_losses = []
            for batch in loader:
                optimizer.zero_grad(set_to_none=True)
                loss = loss_fn(forward(model, batch), batch[-1])
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise NonFiniteLoss(f"loss={value} at epoch {epoch} step {state.step + 1} "
                                        f"lr={optimizer.param_groups[0]['lr']:g}; last good checkpoint: "
                                        f"{state.checkpoints[-1] if state.checkpoints else 'none'}")
                loss.backward()
                optimizer.step()
                state.step += 1
                state.step_losses.append(value)
                epoch_losses.append(value)
                logger.row(state.step, epoch, repr(value), repr(optimizer.param_groups[0]["lr"]),
                           f"{time.time() - t0:.3f}")
            record = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)),
                      "lr": optimizer.param_groups[0]["lr"]}
            if val_loader is not None:
                record.update(_val_metrics(model, val_loader, forward))
            state.epoch = epoch
            state.checkpoints.append(ckpt(f"epoch_{epoch:03d}.pt", epoch))
            if cfg.swa.enabled and epoch >= swa_start:
                state.swa.update(state_dict_of(model))
            if scheduler is not None:
                # validation main score when available, else negated train loss
                signal = record.get("val_main_score", -record["train_loss"])
                if math.isfinite(signal):
                    scheduler.step(signal)
            state.history.append(record)
            log.info("epoch %d %s", epoch, record)
    finally:
        logger.close()

    if cfg.swa.enabled and state.swa.count:
        sd = state.swa.average()
        if hasattr(model, "load_head_state_dict"):
            model.load_head_state_dict(sd)
        else:
            model.load_state_dict(sd)
        bn_loader = DataLoader(train_ds, batch_size=cfg.batch_size, shuffle=False)
        recompute_bn(model, bn_loader, forward)
        state.final_checkpoint = ckpt("swa.pt", state.epoch)
    else:
        state.final_checkpoint = state.checkpoints[-1]
    model.eval()
    state.rng_state = torch.get_rng_state()
    return state


def train_fr(records, backbone_spec: BackboneSpec, conformer_config: ConformerConfig,
             train_config: TrainConfig, out_dir, aug: Optional[AugmentationSpec] = None,
             val_records=None, normalizer=None, allow_random_backbone=False):
    """Train the conformer head of an FR teacher; the backbone stays frozen."""
    if not records:
        raise EmptySplit("no training records")
    normalizer = normalizer or MOSNormalizer()
    aug = aug or base_augmentation(backbone_spec.input_size)
    torch.manual_seed(train_config.seed)
    backbone = build_backbone(backbone_spec, allow_random=allow_random_backbone)
    model = IQAConformer(conformer_config, backbone)
    train_ds = FRPairDataset(records, normalizer, aug, seed=train_config.seed)
    val_ds = None
    if val_records:
        val_ds = FRPairDataset(val_records, normalizer, aug, train=False)
    echo = {"conformer": conformer_config, "backbone": backbone_spec}
    return _fit(model, train_ds, train_config, _fr_forward, out_dir, "fr_teacher", echo, normalizer, val_ds)


def train_nr(records, student_spec: StudentSpec, train_config: TrainConfig, aug: AugmentationSpec,
             out_dir, val_records=None, normalizer=None):
    """Train an NR student on distorted images only (labels or pseudo-labels)."""
    if not records:
        raise EmptySplit("no training records")
    missing = [r.dist_path for r in records if r.mos is None]
    if missing:
        raise DataError(f"{len(missing)} NR records without mos, e.g. {missing[0]}")
    normalizer = normalizer or MOSNormalizer()
    model = build_student(student_spec, seed=train_config.seed)
    train_ds = NRDataset(records, normalizer, aug, seed=train_config.seed)
    val_ds = None
    if val_records:
        val_ds = NRDataset(val_records, normalizer, aug, train=False)
    echo = {"student": student_spec}
    return _fit(model, train_ds, train_config, _nr_forward, out_dir, "nr_student", echo, normalizer, val_ds)
