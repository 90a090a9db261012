"""Bi-level pruning: alternating lower-level SGD on the weights and an
implicit-gradient-corrected projected step on the mask scores.

One iteration, with binary mask ``m``, relaxed scores ``s`` and
``g = dl/dz`` evaluated at ``z = m * theta``::

    theta <- theta - alpha * (m * g(B1) + gamma * theta)          (N times)
    s     <- clip(s - beta * R[(theta - s * g(B2) / gamma) * g(B2)], 0, 1)
    m     <- top-k(s)

``R`` folds the per-parameter gradient onto the pruning groups. Dropping the
``s * g / gamma`` correction gives the gradient of the single-level
objective, ``theta * g``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import SCHEMES, BatchScheduler, ConfigError
from .masking import GroupMap, SparsityTarget, init_scores, mask_iou, project_topk
from .models import Network, accuracy, loss_and_grad
from .records import EpochRow, GradCounter, RunRecord
from .tensor import NumericError
from .training import cosine_lr, realized_sparsity

log = logging.getLogger(__name__)


@dataclass
class BipConfig:
    alpha: float = 0.01
    beta: float = 0.1
    gamma: float = 1.0
    lower_steps: int = 1
    epochs: int = 30
    batch_size: int = 64
    batch_scheme: str = "random"
    lr_schedule: str = "cosine"
    seed: int = 0
    # False drops the implicit-gradient correction (the gamma -> inf limit)
    use_ig: bool = True
    # "soft": relaxed scores inside the correction; "binary": projected mask
    ig_mask: str = "soft"
    group_reduce: str = "sum"
    per_layer: bool = False
    debug: bool = False
    retrain_epochs: int = 0

    def validate(self):
        errs = []
        if not self.alpha > 0 or not self.beta > 0:
            errs.append("alpha and beta must be > 0")
        if not self.gamma > 0:
            errs.append("gamma must be > 0")
        if self.lower_steps < 1:
            errs.append("lower_steps (N) must be >= 1")
        if self.epochs < 1:
            errs.append("epochs must be >= 1")
        if self.batch_scheme not in SCHEMES:
            errs.append(f"batch_scheme must be one of {SCHEMES}")
        if self.lr_schedule not in ("cosine", "constant"):
            errs.append("lr_schedule must be 'cosine' or 'constant'")
        if self.ig_mask not in ("soft", "binary"):
            errs.append("ig_mask must be 'soft' or 'binary'")
        if self.group_reduce not in ("sum", "mean"):
            errs.append("group_reduce must be 'sum' or 'mean'")
        if errs:
            raise ConfigError("; ".join(errs))

    def rates(self, epoch):
        if self.lr_schedule == "constant":
            return self.alpha, self.beta
        return (cosine_lr(self.alpha, epoch, self.epochs),
                cosine_lr(self.beta, epoch, self.epochs))


@dataclass
class BipState:
    theta: np.ndarray
    scores: np.ndarray
    mask: np.ndarray
    t: int = 0
    counter: GradCounter = field(default_factory=GradCounter)


def initial_state(theta0, gm: GroupMap, target: SparsityTarget, per_layer=False) -> BipState:
    scores = init_scores(theta0, gm)
    return BipState(np.array(theta0, dtype=np.float64), scores,
                    project_topk(scores, target, gm, per_layer))


def theta_step(net: Network, state: BipState, batch, alpha_t, gamma):
    """One lower-level SGD step. Returns (new theta, loss on ``batch``)."""
    m = state.mask.astype(np.float64)
    loss, g = loss_and_grad(net, m * state.theta, batch)
    state.counter.theta += 1
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite lower-level gradient at iteration {state.t}")
    return state.theta - alpha_t * (m * g + gamma * state.theta), loss


def objective_grad_m(theta, m, g, gamma, use_ig=True):
    """Per-parameter upper-level gradient ``(theta - m * g / gamma) * g``.

    ``m`` is the mask entering the correction term expanded to length n;
    with ``use_ig=False`` this is just ``theta * g``.
    """
    if not gamma > 0:
        raise ConfigError("gamma must be > 0")
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if not use_ig:
        return theta * g
    return (theta - np.asarray(m, dtype=np.float64) * g / gamma) * g


def m_step(net: Network, state: BipState, batch, beta_t, cfg: BipConfig,
           gm: GroupMap, target: SparsityTarget):
    """Upper-level projected step. Returns (new scores, new binary mask)."""
    m = state.mask.astype(np.float64)
    _, g = loss_and_grad(net, m * state.theta, batch)
    state.counter.m += 1
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite upper-level gradient at iteration {state.t}")
    ig_m = gm.expand(state.scores) if cfg.ig_mask == "soft" else m
    per_param = objective_grad_m(state.theta, ig_m, g, cfg.gamma, cfg.use_ig)
    if cfg.debug:
        _check_decomposition(per_param, state.theta, ig_m, g, cfg)
    grad = gm.reduce(per_param, cfg.group_reduce)
    scores = np.clip(state.scores - beta_t * grad, 0.0, 1.0)
    return scores, project_topk(scores, target, gm, cfg.per_layer)


def _check_decomposition(per_param, theta, ig_m, g, cfg):
    free = theta * g
    if not cfg.use_ig:
        if not np.array_equal(per_param, free):
            raise AssertionError("IG-free update differs from theta * g")
        return
    correction = (ig_m * g) * g / cfg.gamma
    # the subtraction cancels, so compare on the scale of the operands
    scale = np.abs(free) + np.abs(correction)
    if np.any(np.abs(free - per_param - correction) > 1e-12 * scale + 1e-300):
        raise AssertionError("full update != IG-free update - (1/gamma) (m g) g")


def bip_train(net: Network, train, test, target: SparsityTarget, gm: GroupMap,
              cfg: BipConfig, theta0, record: Optional[RunRecord] = None):
    """Run the alternating scheme from a pretrained ``theta0``.

    Returns (mask, m * theta, record). Gradient-evaluation counts depend
    only on (epochs, |train|, batch size, N).
    """
    cfg.validate()
    sched = BatchScheduler(len(train), cfg.batch_size, cfg.batch_scheme, cfg.seed)
    if cfg.batch_scheme == "random" and sched.batches_per_epoch < 2:
        raise ConfigError("random batch scheme needs at least 2 batches per epoch")
    record = record if record is not None else RunRecord("bip", cfg.seed, target.p)
    state = initial_state(theta0, gm, target, cfg.per_layer)
    prev_mask = state.mask.copy()
    for epoch in range(cfg.epochs):
        alpha_t, beta_t = cfg.rates(epoch)
        lower = sched.lower_batches(epoch)
        upper = sched.upper_batches(epoch)
        losses = []
        for step, (b1, b2) in enumerate(zip(lower, upper)):
            try:
                state.theta, loss = theta_step(net, state, train.subset(b1), alpha_t, cfg.gamma)
                losses.append(loss)
                for j in range(1, cfg.lower_steps):
                    extra = train.subset(sched.extra_lower_batch(epoch, step, j))
                    state.theta, _ = theta_step(net, state, extra, alpha_t, cfg.gamma)
                state.scores, state.mask = m_step(
                    net, state, train.subset(b2), beta_t, cfg, gm, target)
            except NumericError as exc:
                raise NumericError(f"bip epoch {epoch} step {step}: {exc}",
                                   op=exc.op, layer=exc.layer) from exc
            state.t += 1
        z = state.mask * state.theta
        iou = mask_iou(prev_mask, state.mask)
        prev_mask = state.mask.copy()
        record.add_row(EpochRow(
            epoch=epoch, train_loss=float(np.mean(losses)), test_acc=accuracy(net, z, test),
            sparsity_param_level=realized_sparsity(state.mask, net.n), mask_iou_vs_prev=iou,
            theta_grad_evals=state.counter.theta, m_grad_evals=state.counter.m))
        log.debug("bip epoch %d loss %.4f acc %.4f iou %.4f", epoch, record.rows[-1].train_loss,
                  record.rows[-1].test_acc, iou)
    mask = state.mask
    weights = mask * state.theta
    record.theta_grad_evals = state.counter.theta
    record.m_grad_evals = state.counter.m
    record.train_epochs = cfg.epochs
    record.realized_sparsity = realized_sparsity(mask, net.n)
    record.test_acc = accuracy(net, weights, test)
    record.extras["scores"] = state.scores
    return mask, weights, record
