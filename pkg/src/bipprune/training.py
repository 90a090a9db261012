"""Plain and mask-frozen SGD loops shared by the dense model and the baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import BatchScheduler, ConfigError
from .models import Network, Snapshot, accuracy, loss_and_grad
from .records import EpochRow, GradCounter, RunRecord
from .tensor import NumericError

DIVERGENCE_LOSS = 1e3


def cosine_lr(base, epoch, epochs):
    return base * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))


def step_lr(base, epoch, epochs):
    """x0.1 at 50% and again at 75% of training."""
    if epoch >= 0.75 * epochs:
        return base * 0.01
    if epoch >= 0.5 * epochs:
        return base * 0.1
    return base


SCHEDULES = {"cosine": cosine_lr, "step": step_lr, "constant": lambda base, e, n: base}


@dataclass
class RetrainConfig:
    epochs: int = 30
    lr: float = 0.1
    batch_size: int = 64
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    seed: int = 0
    rewind_epoch: Optional[int] = None

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("retrain epochs must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("learning rate and weight decay must be non-negative")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.rewind_epoch is not None and not 0 <= self.rewind_epoch <= self.epochs:
            raise ConfigError("rewind epoch outside [0, epochs]")

    @property
    def resolved_rewind_epoch(self) -> int:
        if self.rewind_epoch is not None:
            return self.rewind_epoch
        return max(1, int(math.ceil(0.1 * self.epochs)))


def realized_sparsity(mask, n) -> float:
    if mask is None:
        return 0.0
    return 1.0 - float(np.count_nonzero(mask)) / n


def sgd_train(net: Network, train, test, theta, cfg: RetrainConfig, mask=None,
              record: Optional[RunRecord] = None, counter: Optional[GradCounter] = None,
              start_epoch=0, snapshot_epochs=(), stop_epoch=None):
    """SGD on the mean loss at ``z = mask * theta``.

    With a mask the update is ``theta -= lr * mask * (grad + wd * theta)``
    and masked entries are zeroed first, so they stay exactly 0.
    Returns (theta, snapshots) where snapshot ``e`` holds the weights at the
    start of epoch ``e``.
    """
    cfg.validate()
    sched_fn = SCHEDULES[cfg.schedule]
    theta = np.array(theta, dtype=np.float64)
    m = None if mask is None else np.asarray(mask, dtype=np.float64)
    if m is not None:
        theta *= m
    counter = counter if counter is not None else GradCounter()
    batches = BatchScheduler(len(train), cfg.batch_size, "same", cfg.seed)
    stop = cfg.epochs if stop_epoch is None else stop_epoch
    snapshots = []
    for epoch in range(start_epoch, stop):
        if epoch in snapshot_epochs:
            snapshots.append(Snapshot(epoch, theta.copy(), {"seed": cfg.seed, "epoch": epoch}))
        lr = sched_fn(cfg.lr, epoch, cfg.epochs)
        losses = []
        for idx in batches.lower_batches(epoch):
            z = theta if m is None else m * theta
            loss, g = loss_and_grad(net, z, train.subset(idx))
            counter.theta += 1
            if loss > DIVERGENCE_LOSS:
                raise NumericError(f"training diverged at epoch {epoch}: loss {loss:.3g}")
            step = g + cfg.weight_decay * theta
            theta -= lr * (step if m is None else m * step)
            losses.append(loss)
        if record is not None:
            z = theta if m is None else m * theta
            record.add_row(EpochRow(
                epoch=epoch, train_loss=float(np.mean(losses)),
                test_acc=accuracy(net, z, test),
                sparsity_param_level=realized_sparsity(m, net.n),
                mask_iou_vs_prev=1.0, theta_grad_evals=counter.theta, m_grad_evals=counter.m))
    if stop in snapshot_epochs:
        snapshots.append(Snapshot(stop, theta.copy(), {"seed": cfg.seed, "epoch": stop}))
    return theta, snapshots
