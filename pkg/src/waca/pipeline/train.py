"""Training loop with best-validation-F1 checkpoint selection."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ..backbone import ModelCheckpoint, WacaUNet
from ..evalkit import HotspotConfig, f1, hotspot_mask
from ..tensor import Tensor, no_grad
from .data import NormStats, apply_zscore, compute_norm_stats, dihedral_transform, lanczos_resize
from .losses import LossConfig, composite_loss
from .optim import AdamState, adamw_step, cosine_lr

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "loss", "val_mae_mv", "val_f1", "lr")


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, step: int):
        super().__init__(f"loss became non-finite in epoch {epoch} (step {step})")
        self.epoch = epoch
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 4
    lr_max: float = 4e-5
    lr_min: float = 0.0
    weight_decay: float = 1e-3
    seed: int = 0
    train_resolution: Optional[int] = None  # None keeps the native case resolution
    augment: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ValueError(f"need 0 <= lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return asdict(self)


def _prepare(cases, stats: NormStats, resolution: Optional[int], dtype):
    xs, ys = [], []
    for case in cases:
        x = apply_zscore(np.asarray(case.features, dtype=np.float64), stats)
        y = np.asarray(case.target, dtype=np.float64)
        if resolution is not None and x.shape[1:] != (resolution, resolution):
            x = lanczos_resize(x, resolution, resolution)
            y = lanczos_resize(y, resolution, resolution)
        xs.append(x.astype(dtype))
        ys.append(y.astype(dtype))
    return xs, ys


def _batches(n: int, size: int, order: np.ndarray):
    for start in range(0, n, size):
        yield order[start : start + size]


def validate(model: WacaUNet, xs, ys, hotspot: HotspotConfig = HotspotConfig(), batch_size: int = 8):
    """Mean MAE and mean hotspot F1 over prepared (normalized) validation arrays."""
    maes, f1s = [], []
    with no_grad():
        for start in range(0, len(xs), batch_size):
            x = np.stack(xs[start : start + batch_size])
            pred = model.forward(Tensor(x)).data.astype(np.float64)
            for p, y in zip(pred, ys[start : start + batch_size]):
                p2, y2 = p[0], y[0].astype(np.float64)
                maes.append(float(np.abs(p2 - y2).mean()))
                f1s.append(f1(hotspot_mask(p2, hotspot), hotspot_mask(y2, hotspot))[0])
    return float(np.mean(maes)), float(np.mean(f1s))


def _dataset_loss(model, xs, ys, loss_cfg, batch_size):
    total = 0.0
    with no_grad():
        for start in range(0, len(xs), batch_size):
            x = np.stack(xs[start : start + batch_size])
            y = np.stack(ys[start : start + batch_size])
            total += composite_loss(model.forward(Tensor(x)), Tensor(y), loss_cfg).item() * len(x)
    return total / len(xs)


def train(
    model: WacaUNet,
    train_set: Sequence,
    val_set: Sequence,
    train_cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    norm_stats: Optional[NormStats] = None,
    hotspot: HotspotConfig = HotspotConfig(),
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> ModelCheckpoint:
    """Fit ``model`` in place and return the checkpoint with the best validation F1.

    Row 0 of ``checkpoint.history`` scores the untrained model (its ``loss`` is
    the un-augmented training-set loss); rows 1..epochs are the mean training
    loss of each epoch followed by validation at training resolution. F1 ties
    go to the lower validation MAE, then to the earlier epoch.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    dtype = np.dtype(train_cfg.dtype)
    if model.dtype != dtype:
        model.astype(dtype)
    stats = norm_stats if norm_stats is not None else compute_norm_stats(train_set)
    xs, ys = _prepare(train_set, stats, train_cfg.train_resolution, dtype)
    vxs, vys = _prepare(val_set, stats, train_cfg.train_resolution, dtype)

    n = len(xs)
    per_epoch = math.ceil(n / train_cfg.batch_size)
    total_steps = train_cfg.epochs * per_epoch
    params = model.named_parameters()
    opt = AdamState()
    history: list[dict] = []

    def record(epoch: int, loss: float, lr: float) -> dict:
        v_mae, v_f1 = validate(model, vxs, vys, hotspot)
        row = {"epoch": epoch, "loss": loss, "val_mae_mv": v_mae, "val_f1": v_f1, "lr": lr}
        history.append(row)
        log.info("epoch %d loss %.5g val_mae %.5g val_f1 %.4f lr %.3g", epoch, loss, v_mae, v_f1, lr)
        if on_epoch is not None:
            on_epoch(row)
        return row

    row = record(0, _dataset_loss(model, xs, ys, loss_cfg, train_cfg.batch_size), train_cfg.lr_max)
    best = ModelCheckpoint(model.config, model.clone(), 0, row["val_f1"], stats)
    best_mae = row["val_mae_mv"]

    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
        running, lr = 0.0, train_cfg.lr_max
        for batch in _batches(n, train_cfg.batch_size, order):
            fx, fy = [], []
            for idx in batch:
                code = 0
                if train_cfg.augment:
                    code = int(np.random.default_rng([train_cfg.seed, epoch, int(idx)]).integers(8))
                fx.append(dihedral_transform(xs[idx], code))
                fy.append(dihedral_transform(ys[idx], code))
            x, y = Tensor(np.stack(fx)), Tensor(np.stack(fy))
            lr = cosine_lr(step, total_steps, train_cfg.lr_max, train_cfg.lr_min)
            model.zero_grad()
            loss = composite_loss(model.forward(x), y, loss_cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, step)
            loss.backward()
            adamw_step(params, {k: p.grad for k, p in params.items()}, opt, lr,
                       weight_decay=train_cfg.weight_decay)
            running += value * len(batch)
            step += 1
        row = record(epoch, running / n, lr)
        better = row["val_f1"] > best.val_f1 or (row["val_f1"] == best.val_f1 and row["val_mae_mv"] < best_mae)
        if better:
            best = ModelCheckpoint(model.config, model.clone(), epoch, row["val_f1"], stats)
            best_mae = row["val_mae_mv"]
    model.zero_grad()
    best.history = history
    return best


def write_log_csv(history: Sequence[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
        for row in history:
            writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_FIELDS[1:]])
