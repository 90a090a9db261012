"""Comparison pipelines: dense training, OMP, IMP with rewinding, random and
SNIP-style pruning at initialization, and a single-level score optimizer in
the style of Hydra."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bip import BipConfig
from .data import BatchScheduler, ConfigError
from .masking import GroupMap, SparsityTarget, init_scores, mask_iou, project_topk, select_groups
from .models import Network, accuracy, grad_z, loss_and_grad
from .records import EpochRow, GradCounter, RunRecord
from .training import RetrainConfig, cosine_lr, realized_sparsity, sgd_train


class ScheduleError(ConfigError):
    pass


def _finish(record, net, test, mask, weights, counter, epochs):
    record.theta_grad_evals = counter.theta
    record.m_grad_evals = counter.m
    record.train_epochs = epochs
    record.realized_sparsity = realized_sparsity(mask, net.n)
    record.test_acc = accuracy(net, weights, test)
    return record


def train_dense(net: Network, train, test, cfg: RetrainConfig, theta0,
                record: Optional[RunRecord] = None, counter: Optional[GradCounter] = None):
    """Dense SGD. Returns (theta, [snapshot at epoch 0, snapshot at rewind epoch])."""
    counter = counter if counter is not None else GradCounter()
    rewind = cfg.resolved_rewind_epoch
    theta, snaps = sgd_train(net, train, test, theta0, cfg, record=record, counter=counter,
                             snapshot_epochs=(0, rewind))
    if record is not None:
        _finish(record, net, test, None, theta, counter, cfg.epochs)
    return theta, snaps


def magnitude_mask(theta, target: SparsityTarget, gm: GroupMap) -> np.ndarray:
    return project_topk(gm.reduce(np.abs(theta), how="mean"), target, gm)


def retrain_masked(net, train, test, theta_start, mask, cfg: RetrainConfig, record, counter):
    theta, _ = sgd_train(net, train, test, theta_start, cfg, mask=mask,
                         record=record, counter=counter)
    return mask * theta


def omp_run(net: Network, train, test, target: SparsityTarget, gm: GroupMap,
            retrain: RetrainConfig, theta_dense, theta_rewind):
    """Magnitude mask of the dense weights, rewind, retrain once."""
    record = RunRecord("omp", retrain.seed, target.p)
    counter = GradCounter()
    mask = magnitude_mask(theta_dense, target, gm)
    weights = retrain_masked(net, train, test, theta_rewind, mask, retrain, record, counter)
    return mask, weights, _finish(record, net, test, mask, weights, counter, retrain.epochs)


@dataclass
class ImpSchedule:
    """Geometric schedule: each round keeps r = (1 - p)^(1/T) of the survivors."""

    p: float
    rounds: int = 3

    def __post_init__(self):
        if self.rounds < 1:
            raise ScheduleError("IMP needs at least one round")
        if not 0.0 <= self.p < 1.0:
            raise ScheduleError("pruning ratio must lie in [0, 1)")

    @property
    def keep_ratio(self) -> float:
        return (1.0 - self.p) ** (1.0 / self.rounds)

    def retained_fractions(self):
        return [self.keep_ratio ** t for t in range(1, self.rounds + 1)]

    def group_counts(self, num_groups, final_k):
        """Per-round retained group counts: non-increasing, last forced to ``final_k``."""
        ks, prev = [], num_groups
        for t, frac in enumerate(self.retained_fractions(), start=1):
            k = final_k if t == self.rounds else min(prev, int(math.floor(frac * num_groups + 0.5)))
            if k <= 0:
                raise ScheduleError(f"IMP round {t} would retain no groups")
            k = min(k, prev)
            ks.append(k)
            prev = k
        return ks


def imp_run(net: Network, train, test, sched: ImpSchedule, retrain: RetrainConfig, theta0,
            gm: GroupMap, target: SparsityTarget, dense: RetrainConfig, pretrained=None):
    """Train, then T rounds of {magnitude prune survivors, rewind, retrain}.

    ``pretrained`` may carry (theta_dense, theta_rewind, dense_grad_evals) to
    reuse an existing dense run; its cost is still charged to this record.
    """
    record = RunRecord("imp", retrain.seed, target.p)
    counter = GradCounter()
    if pretrained is None:
        theta, snaps = train_dense(net, train, test, dense, theta0, counter=counter)
        theta_rewind = snaps[1].params
    else:
        theta, theta_rewind, dense_evals = pretrained
        counter.theta += dense_evals
    alive = np.ones(gm.num_groups, dtype=bool)
    mask = np.ones(net.n, dtype=np.int8)
    for k_t in sched.group_counts(gm.num_groups, target.k_groups):
        mags = gm.reduce(np.abs(theta), how="mean")
        mags[~alive] = -1.0
        alive = select_groups(mags, k_t)
        mask = alive[gm.group_of].astype(np.int8)
        theta = retrain_masked(net, train, test, theta_rewind, mask, retrain, record, counter)
    record.extras["rounds"] = sched.rounds
    epochs = dense.epochs + sched.rounds * retrain.epochs
    return mask, theta, _finish(record, net, test, mask, theta, counter, epochs)


def random_mask(target: SparsityTarget, gm: GroupMap, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    chosen = np.zeros(gm.num_groups, dtype=bool)
    chosen[rng.choice(gm.num_groups, size=target.k_groups, replace=False)] = True
    return chosen[gm.group_of].astype(np.int8)


def snip_mask(net: Network, theta0, batch, target: SparsityTarget, gm: GroupMap) -> np.ndarray:
    """Connection saliency |theta * dl/dtheta| at initialization."""
    g = grad_z(net, theta0, batch)
    return project_topk(gm.reduce(np.abs(theta0 * g)), target, gm)


def snip_batch(train, seed):
    size = min(len(train), 128)
    idx = np.random.default_rng([seed, 7]).choice(len(train), size=size, replace=False)
    return train.subset(np.sort(idx))


def at_init_run(method, net: Network, train, test, target: SparsityTarget, gm: GroupMap,
                retrain: RetrainConfig, theta0):
    """Random or SNIP mask at initialization, then train the sparse net from theta0."""
    record = RunRecord(method, retrain.seed, target.p)
    counter = GradCounter()
    if method == "random":
        mask = random_mask(target, gm, retrain.seed)
    elif method == "snip":
        mask = snip_mask(net, theta0, snip_batch(train, retrain.seed), target, gm)
        counter.m += 1
    else:
        raise ValueError(f"unknown at-init method {method!r}")
    weights = retrain_masked(net, train, test, theta0, mask, retrain, record, counter)
    return mask, weights, _finish(record, net, test, mask, weights, counter, retrain.epochs)


def hydra_run(net: Network, train, test, target: SparsityTarget, gm: GroupMap, cfg: BipConfig,
              theta_dense, retrain: RetrainConfig):
    """Phase 1: descend the scores along theta * g with theta frozen and
    project every step. Phase 2: retrain the surviving weights."""
    record = RunRecord("hydra", cfg.seed, target.p)
    counter = GradCounter()
    theta = np.array(theta_dense, dtype=np.float64)
    scores = init_scores(theta, gm)
    mask = project_topk(scores, target, gm)
    prev = mask.copy()
    sched = BatchScheduler(len(train), cfg.batch_size, "same", cfg.seed)
    for epoch in range(cfg.epochs):
        beta_t = cosine_lr(cfg.beta, epoch, cfg.epochs)
        losses = []
        for idx in sched.lower_batches(epoch):
            loss, g = loss_and_grad(net, mask * theta, train.subset(idx))
            counter.m += 1
            losses.append(loss)
            scores = np.clip(scores - beta_t * gm.reduce(theta * g, cfg.group_reduce), 0.0, 1.0)
            mask = project_topk(scores, target, gm)
        record.add_row(EpochRow(
            epoch=epoch, train_loss=float(np.mean(losses)), test_acc=accuracy(net, mask * theta, test),
            sparsity_param_level=realized_sparsity(mask, net.n), mask_iou_vs_prev=mask_iou(prev, mask),
            theta_grad_evals=counter.theta, m_grad_evals=counter.m))
        prev = mask.copy()
    record.extras["phase1_theta"] = theta
    phase2 = dataclasses.replace(retrain, schedule="cosine")
    weights = retrain_masked(net, train, test, theta, mask, phase2, record, counter)
    record.extras["scores"] = scores
    return mask, weights, _finish(record, net, test, mask, weights, counter,
                                  cfg.epochs + phase2.epochs)
