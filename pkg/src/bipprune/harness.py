"""Experiment configuration, orchestration and reporting."""

from __future__ import annotations

import dataclasses
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import toml

from . import baselines
from .bip import BipConfig, bip_train
from .data import ConfigError, Dataset, load_idx, make_blobs
from .masking import GRANULARITIES, build_group_map, make_target
from .models import ARCHITECTURES, build_network, init_params, write_checkpoint
from .records import METHODS, RunRecord, rows_to_csv, summaries_to_csv
from .training import RetrainConfig

log = logging.getLogger(__name__)

# methods that start from a dense pretrained model
NEEDS_DENSE = {"dense", "bip", "omp", "imp", "hydra"}
SECTIONS_FOR = {
    "dense": ("dense",),
    "bip": ("dense", "bip"),
    "omp": ("dense", "retrain"),
    "imp": ("dense", "retrain", "imp"),
    "random": ("retrain",),
    "snip": ("retrain",),
    "hydra": ("dense", "retrain", "hydra"),
}
SPARSITY_AGNOSTIC = ("bip", "omp", "random", "snip", "hydra")
TICKET_MARK = "✗"


@dataclass
class DatasetConfig:
    kind: str = "blobs"
    classes: int = 4
    per_class: int = 250
    dim: int = 8
    separation: float = 4.0
    seed: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    pool8: bool = True

    def load(self):
        if self.kind == "blobs":
            return make_blobs(self.classes, self.per_class, self.dim, self.separation, self.seed)
        train = load_idx(self.train_images, self.train_labels, self.pool8, self.classes, "train")
        test = load_idx(self.test_images, self.test_labels, self.pool8, self.classes, "test")
        return train, test


@dataclass
class ImpSection:
    rounds: int = 3


@dataclass
class HydraSection:
    epochs: int = 30
    beta: float = 0.1
    batch_size: int = 64
    group_reduce: str = "sum"


@dataclass
class ExperimentConfig:
    model: str = "mlp-small"
    methods: list = field(default_factory=lambda: ["dense", "bip", "omp", "random"])
    granularity: str = "element"
    sparsities: list = field(default_factory=lambda: [0.5, 0.9])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "runs"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    dense: Optional[RetrainConfig] = None
    retrain: Optional[RetrainConfig] = None
    bip: Optional[BipConfig] = None
    imp: Optional[ImpSection] = None
    hydra: Optional[HydraSection] = None

    def violations(self) -> list:
        errs = []
        if self.model not in ARCHITECTURES:
            errs.append(f"model: unknown architecture {self.model!r}")
        if not self.methods:
            errs.append("methods: must list at least one method")
        for m in self.methods:
            if m not in METHODS:
                errs.append(f"methods: unknown method {m!r}")
        if self.granularity not in GRANULARITIES:
            errs.append(f"granularity: must be one of {GRANULARITIES}")
        if not self.sparsities and any(m != "dense" for m in self.methods):
            errs.append("sparsities: must be nonempty")
        for p in self.sparsities:
            if not isinstance(p, (int, float)) or not 0.0 <= p < 1.0:
                errs.append(f"sparsities: {p!r} outside [0, 1)")
        if not self.seeds:
            errs.append("seeds: must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            errs.append("seeds: duplicates")
        if self.dataset.kind not in ("blobs", "idx"):
            errs.append(f"dataset.kind: must be 'blobs' or 'idx', got {self.dataset.kind!r}")
        elif self.dataset.kind == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if not getattr(self.dataset, key):
                    errs.append(f"dataset.{key}: required for idx datasets")
        elif self.dataset.classes < 2:
            errs.append("dataset.classes: must be >= 2")
        needed = sorted({s for m in self.methods if m in SECTIONS_FOR for s in SECTIONS_FOR[m]})
        for name in needed:
            if getattr(self, name) is None:
                errs.append(f"[{name}]: section required by methods {self.methods}")
        for name in ("dense", "retrain"):
            sec = getattr(self, name)
            if sec is not None:
                try:
                    sec.validate()
                except ConfigError as exc:
                    errs.append(f"{name}: {exc}")
        if self.bip is not None:
            try:
                self.bip.validate()
            except ConfigError as exc:
                errs.append(f"bip: {exc}")
            if self.bip.retrain_epochs < 0:
                errs.append("bip.retrain_epochs: must be >= 0")
            elif self.bip.retrain_epochs > 0 and self.retrain is None:
                errs.append("[retrain]: section required by bip.retrain_epochs > 0")
        if self.imp is not None and self.imp.rounds < 1:
            errs.append("imp.rounds: must be >= 1")
        if self.hydra is not None:
            if self.hydra.epochs < 0:
                errs.append("hydra.epochs: must be >= 0")
            if not self.hydra.beta > 0:
                errs.append("hydra.beta: must be > 0")
        return errs

    def validate(self):
        errs = self.violations()
        if errs:
            raise ConfigError("invalid experiment config:\n  - " + "\n  - ".join(errs))
        return self

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("model", "methods", "granularity", "sparsities",
                                              "seeds", "output_dir")}
        for name in ("dataset", "dense", "retrain", "bip", "imp", "hydra"):
            sec = getattr(self, name)
            if sec is not None:
                out[name] = {k: v for k, v in dataclasses.asdict(sec).items() if v is not None}
        return out


_SECTION_TYPES = {"dataset": DatasetConfig, "dense": RetrainConfig, "retrain": RetrainConfig,
                  "bip": BipConfig, "imp": ImpSection, "hydra": HydraSection}


def _build_section(name, cls, raw, errs):
    if not isinstance(raw, dict):
        errs.append(f"[{name}]: expected a table")
        return None
    known = {f.name: f for f in dataclasses.fields(cls)}
    kw = {}
    for key, value in raw.items():
        if key not in known:
            errs.append(f"{name}.{key}: unknown key")
            continue
        default = known[key].default
        if isinstance(default, bool) and not isinstance(value, bool):
            errs.append(f"{name}.{key}: expected a boolean")
        elif isinstance(default, int) and not isinstance(default, bool) and not (
                isinstance(value, int) and not isinstance(value, bool)):
            errs.append(f"{name}.{key}: expected an integer")
        elif isinstance(default, float) and not isinstance(value, (int, float)):
            errs.append(f"{name}.{key}: expected a number")
        elif isinstance(default, float):
            kw[key] = float(value)
        else:
            kw[key] = value
    return cls(**kw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate; every violation is reported at once."""
    errs = []
    top = {}
    simple = {"model", "methods", "method", "granularity", "sparsities", "seeds", "output_dir"}
    for key, value in raw.items():
        if key in _SECTION_TYPES:
            sec = _build_section(key, _SECTION_TYPES[key], value, errs)
            if sec is not None:
                top[key] = sec
        elif key in simple:
            top[key] = value
        else:
            errs.append(f"{key}: unknown key")
    if "method" in top:
        m = top.pop("method")
        top["methods"] = [m] if isinstance(m, str) else list(m)
    for key in ("methods", "sparsities", "seeds"):
        if key in top and not isinstance(top[key], list):
            errs.append(f"{key}: expected a list")
            top.pop(key)
    cfg = ExperimentConfig(**top)
    errs.extend(cfg.violations())
    if errs:
        raise ConfigError("invalid experiment config:\n  - " + "\n  - ".join(errs))
    return cfg


def parse_override(text: str):
    """``a.b=value`` -> (["a", "b"], parsed value). Values use TOML syntax;
    bare words fall back to strings."""
    key, sep, value = text.partition("=")
    key = key.lstrip("-")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        parsed = toml.loads(f"v = {value}")["v"]
    except toml.TomlDecodeError:
        parsed = value
    return key.split("."), parsed


def apply_overrides(raw: dict, overrides) -> dict:
    raw = toml.loads(toml.dumps(raw))
    for text in overrides:
        path, value = parse_override(text)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r}: {part} is not a table")
        node[path[-1]] = value
    return raw


def load_config(path, overrides=()) -> ExperimentConfig:
    try:
        raw = toml.load(str(path))
    except (OSError, toml.TomlDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(apply_overrides(raw, overrides))


# ---- orchestration ----------------------------------------------------------

def _input_dim(train: Dataset):
    return int(np.prod(train.inputs.shape[1:]))


def _run_label(method, p, seed):
    return f"{method}" if method == "dense" else f"{method}_p{p:g}_s{seed}"


def _run_cell(cfg: ExperimentConfig, net, gm, train, test, method, p, seed, dense_cache):
    target = make_target(p, gm)
    theta0 = init_params(net, seed)
    retrain = dataclasses.replace(cfg.retrain, seed=seed) if cfg.retrain else None
    d = dense_cache.get(seed)
    if method == "bip":
        bcfg = dataclasses.replace(cfg.bip, seed=seed)
        mask, weights, rec = bip_train(net, train, test, target, gm, bcfg, d["theta"])
        if bcfg.retrain_epochs > 0:
            rcfg = dataclasses.replace(retrain, epochs=bcfg.retrain_epochs)
            counter = baselines.GradCounter(rec.theta_grad_evals, rec.m_grad_evals)
            weights = baselines.retrain_masked(net, train, test, weights, mask, rcfg, rec, counter)
            baselines._finish(rec, net, test, mask, weights, counter,
                              bcfg.epochs + bcfg.retrain_epochs)
    elif method == "omp":
        mask, weights, rec = baselines.omp_run(net, train, test, target, gm, retrain,
                                               d["theta"], d["rewind"])
    elif method == "imp":
        sched = baselines.ImpSchedule(p, cfg.imp.rounds)
        mask, weights, rec = baselines.imp_run(
            net, train, test, sched, retrain, theta0, gm, target, d["cfg"],
            pretrained=(d["theta"], d["rewind"], d["evals"]))
    elif method in ("random", "snip"):
        mask, weights, rec = baselines.at_init_run(method, net, train, test, target, gm,
                                                   retrain, theta0)
    elif method == "hydra":
        h = cfg.hydra
        hcfg = BipConfig(beta=h.beta, epochs=h.epochs, batch_size=h.batch_size,
                         group_reduce=h.group_reduce, seed=seed)
        mask, weights, rec = baselines.hydra_run(net, train, test, target, gm, hcfg,
                                                 d["theta"], retrain)
    else:
        raise ConfigError(f"unknown method {method!r}")
    if method in NEEDS_DENSE and method != "imp":
        rec.pretrain_grad_evals = d["evals"]
    rec.extras.pop("phase1_theta", None)
    return mask, weights, rec


def _dense_run(cfg, net, train, test, seed):
    dcfg = dataclasses.replace(cfg.dense, seed=seed)
    rec = RunRecord("dense", seed, 0.0)
    counter = baselines.GradCounter()
    theta, snaps = baselines.train_dense(net, train, test, dcfg, init_params(net, seed),
                                         record=rec, counter=counter)
    return {"theta": theta, "rewind": snaps[1].params, "evals": counter.theta, "cfg": dcfg,
            "record": rec}


def _threads():
    try:
        return max(1, int(os.environ.get("BIP_THREADS", "1")))
    except ValueError:
        raise ConfigError("BIP_THREADS must be an integer")


def _write_run(runs_dir: Path, net, label, rec, weights, mask):
    (runs_dir / f"{label}.csv").write_text(rows_to_csv(rec))
    write_checkpoint(runs_dir / f"{label}.ckpt", net, weights, mask)


def run_experiment(cfg: ExperimentConfig, force=False, threads=None) -> list:
    """Run every (method, sparsity, seed) cell and write the run directory.

    Layout: ``config.toml`` (echo), ``summary.csv`` and per-run epoch CSVs
    and checkpoints under ``runs/``. Returns the RunRecords in sorted order.
    """
    cfg.validate()
    out = Path(cfg.output_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    train, test = cfg.dataset.load()
    net = build_network(cfg.model, _input_dim(train), train.num_classes)
    gm = build_group_map(net, cfg.granularity)
    workers = threads or _threads()

    seeds = sorted(cfg.seeds)
    dense_cache = {}
    if any(m in NEEDS_DENSE for m in cfg.methods):
        with ThreadPoolExecutor(workers) as pool:
            for seed, res in zip(seeds, pool.map(lambda s: _dense_run(cfg, net, train, test, s),
                                                 seeds)):
                dense_cache[seed] = res

    cells = [(m, float(p), s) for m in cfg.methods if m != "dense"
             for p in sorted(cfg.sparsities) for s in seeds]
    with ThreadPoolExecutor(workers) as pool:
        results = list(pool.map(
            lambda c: _run_cell(cfg, net, gm, train, test, c[0], c[1], c[2], dense_cache), cells))

    # single writer, deterministic order
    out.mkdir(parents=True, exist_ok=True)
    runs_dir = out / "runs"
    runs_dir.mkdir(exist_ok=True)
    echo = cfg.to_dict()
    echo["dataset"]["train_size"] = len(train)
    echo["dataset"]["test_size"] = len(test)
    (out / "config.toml").write_text(toml.dumps(echo))
    records = []
    if "dense" in cfg.methods:
        for seed in seeds:
            d = dense_cache[seed]
            _write_run(runs_dir, net, f"dense_s{seed}", d["record"], d["theta"], None)
            records.append(d["record"])
    for (method, p, seed), (mask, weights, rec) in zip(cells, results):
        _write_run(runs_dir, net, _run_label(method, p, seed), rec, weights, mask)
        records.append(rec)
    (out / "summary.csv").write_text(summaries_to_csv(records))
    return records


# ---- reports ----------------------------------------------------------------

def _group(records):
    cells = {}
    for r in records:
        cells.setdefault((r.method, float(r.sparsity)), []).append(r)
    return cells


@dataclass
class TicketRow:
    method: str
    sparsity: float
    acc_mean: float
    dense_mean: float

    @property
    def winning(self) -> bool:
        return self.acc_mean >= self.dense_mean


@dataclass
class TicketReport:
    rows: list
    sparsest: dict

    def format(self) -> str:
        lines = [f"{'method':<8} {'p':>6} {'acc':>8} {'dense':>8}  ticket"]
        for r in self.rows:
            lines.append(f"{r.method:<8} {r.sparsity:>6.3f} {r.acc_mean:>8.4f} "
                         f"{r.dense_mean:>8.4f}  {'yes' if r.winning else 'no'}")
        lines.append("sparsest winning ticket:")
        for m, p in self.sparsest.items():
            lines.append(f"  {m:<8} {TICKET_MARK if p is None else f'{p:.3f}'}")
        return "\n".join(lines)


def winning_ticket_report(records, dense) -> TicketReport:
    dense = [r for r in dense if r.method == "dense"]
    if not dense:
        raise ConfigError("winning-ticket report needs dense records")
    dense_seeds = sorted(r.seed for r in dense)
    dense_mean = float(np.mean([r.test_acc for r in dense]))
    rows, sparsest = [], {}
    for (method, p), recs in sorted(_group(r for r in records if r.method != "dense").items()):
        seeds = sorted(r.seed for r in recs)
        if seeds != dense_seeds:
            raise ConfigError(f"{method} at p={p:g} has seeds {seeds}, dense has {dense_seeds}")
        row = TicketRow(method, p, float(np.mean([r.test_acc for r in recs])), dense_mean)
        rows.append(row)
        sparsest.setdefault(method, None)
        if row.winning and (sparsest[method] is None or p > sparsest[method]):
            sparsest[method] = p
    return TicketReport(rows, sparsest)


def tradeoff_table(records):
    """(method, p, acc_mean, acc_std) with the population std over seeds."""
    out = []
    for (method, p), recs in sorted(_group(records).items()):
        accs = np.array([r.test_acc for r in recs])
        out.append((method, p, float(accs.mean()), float(accs.std(ddof=0))))
    return out


def emit_tradeoff_plot(records, out_dir, stem="tradeoff"):
    """Write ``<stem>.csv`` and a gnuplot script drawing mean lines with
    +-std bands and a dense reference line. Returns (csv path, script path)."""
    if not records:
        raise ValueError("no records to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = tradeoff_table(records)
    csv_path = out_dir / f"{stem}.csv"
    lines = ["method,p,acc_mean,acc_std"]
    lines += [f"{m},{p!r},{a!r},{s!r}" for m, p, a, s in table]
    csv_path.write_text("\n".join(lines) + "\n")

    methods = sorted({m for m, *_ in table if m != "dense"})
    dense = [a for m, _, a, _ in table if m == "dense"]
    gp = [
        "set datafile separator ','",
        "set key bottom left",
        "set xlabel 'sparsity (%)'",
        "set ylabel 'test accuracy (%)'",
        "set terminal pngcairo size 800,500",
        f"set output '{stem}.png'",
    ]
    plots = []
    for i, m in enumerate(methods, start=1):
        sel = f"(strcol(1) eq '{m}' ? $2*100 : 1/0)"
        plots.append(f"'{stem}.csv' skip 1 using {sel}:($3*100-$4*100):($3*100+$4*100) "
                     f"with filledcurves fs transparent solid 0.2 lc {i} notitle")
        plots.append(f"'{stem}.csv' skip 1 using {sel}:($3*100) with linespoints lc {i} "
                     f"title '{m}'")
    if dense:
        plots.append(f"{dense[0] * 100!r} with lines dt 2 lc rgb 'black' title 'dense'")
    gp.append("plot " + ", \\\n     ".join(plots) if plots else "# nothing to plot")
    script = out_dir / f"{stem}.gp"
    script.write_text("\n".join(gp) + "\n")
    return csv_path, script


@dataclass
class CostReport:
    rows: list        # (method, p, theta_evals, m_evals, pretrain_evals, total)
    constant: dict    # method -> whether totals agree across sparsity

    def format(self) -> str:
        lines = [f"{'method':<8} {'p':>6} {'theta':>10} {'m':>10} {'pretrain':>10} {'total':>10}"]
        for m, p, th, mm, pre, tot in self.rows:
            lines.append(f"{m:<8} {p:>6.3f} {th:>10d} {mm:>10d} {pre:>10d} {tot:>10d}")
        for m, ok in self.constant.items():
            note = "constant across sparsity" if ok else "VARIES across sparsity"
            lines.append(f"{m}: {note}")
        return "\n".join(lines)


def cost_report(records) -> CostReport:
    rows = []
    totals = {}
    for (method, p), recs in sorted(_group(records).items()):
        th = max(r.theta_grad_evals for r in recs)
        mm = max(r.m_grad_evals for r in recs)
        pre = max(r.pretrain_grad_evals for r in recs)
        rows.append((method, p, th, mm, pre, th + mm + pre))
        totals.setdefault(method, set()).add(th + mm + pre)
    constant = {m: len(v) == 1 for m, v in totals.items() if m in SPARSITY_AGNOSTIC}
    return CostReport(rows, constant)


def imp_cost_ratio(rounds, retrain_epochs, dense_epochs) -> float:
    """Total IMP cost in units of one dense training run."""
    return 1.0 + rounds * retrain_epochs / dense_epochs
