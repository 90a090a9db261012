"""Per-epoch metrics, run summaries and their CSV forms."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, fields

METHODS = ("dense", "bip", "omp", "imp", "random", "snip", "hydra")

ROW_COLUMNS = ("method", "epoch", "train_loss", "test_acc", "sparsity_param_level",
               "mask_iou_vs_prev", "theta_grad_evals", "m_grad_evals")
SUMMARY_COLUMNS = ("method", "seed", "sparsity", "test_acc", "realized_sparsity",
                   "theta_grad_evals", "m_grad_evals", "pretrain_grad_evals", "train_epochs")


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    test_acc: float
    sparsity_param_level: float
    mask_iou_vs_prev: float
    theta_grad_evals: int
    m_grad_evals: int


@dataclass
class GradCounter:
    theta: int = 0
    m: int = 0


@dataclass
class RunRecord:
    method: str
    seed: int = 0
    sparsity: float = 0.0
    rows: list = field(default_factory=list)
    test_acc: float = float("nan")
    realized_sparsity: float = 0.0
    theta_grad_evals: int = 0
    m_grad_evals: int = 0
    pretrain_grad_evals: int = 0
    train_epochs: int = 0
    extras: dict = field(default_factory=dict, repr=False)

    def add_row(self, row: EpochRow):
        if self.rows:
            prev = self.rows[-1]
            if row.theta_grad_evals < prev.theta_grad_evals or row.m_grad_evals < prev.m_grad_evals:
                raise ValueError("gradient-evaluation counters must be monotone")
        self.rows.append(row)

    @property
    def total_grad_evals(self) -> int:
        return self.theta_grad_evals + self.m_grad_evals

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in SUMMARY_COLUMNS}


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(record: RunRecord) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_COLUMNS)
    for r in record.rows:
        w.writerow([record.method] + [_fmt(getattr(r, c)) for c in ROW_COLUMNS[1:]])
    return buf.getvalue()


def rows_from_csv(text: str) -> list:
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        out.append(EpochRow(
            epoch=int(r["epoch"]), train_loss=float(r["train_loss"]),
            test_acc=float(r["test_acc"]), sparsity_param_level=float(r["sparsity_param_level"]),
            mask_iou_vs_prev=float(r["mask_iou_vs_prev"]),
            theta_grad_evals=int(r["theta_grad_evals"]), m_grad_evals=int(r["m_grad_evals"])))
    return out


_INT_FIELDS = {"seed", "theta_grad_evals", "m_grad_evals", "pretrain_grad_evals", "train_epochs"}


def summaries_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for rec in records:
        w.writerow([_fmt(getattr(rec, c)) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def summaries_from_csv(text: str) -> list:
    """Rebuild summary-only RunRecords (no epoch rows)."""
    recs = []
    for r in csv.DictReader(io.StringIO(text)):
        kw = {}
        for c in SUMMARY_COLUMNS:
            if c == "method":
                kw[c] = r[c]
            elif c in _INT_FIELDS:
                kw[c] = int(r[c])
            else:
                kw[c] = float(r[c])
        recs.append(RunRecord(**kw))
    return recs
