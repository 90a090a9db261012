"""Mask scores, group structure and the top-k projection onto the budget set."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .models import Network

GRANULARITIES = ("element", "filter", "channel")


@dataclass(frozen=True)
class GroupMap:
    """Partition of the parameter indices [0, n) into G groups.

    ``group_of[i]`` is the group owning parameter ``i``; group ids are
    ordered by their smallest parameter index.
    """

    group_of: np.ndarray
    layer_of_group: np.ndarray

    @property
    def n(self) -> int:
        return len(self.group_of)

    @property
    def num_groups(self) -> int:
        return len(self.layer_of_group)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.group_of, minlength=self.num_groups)

    def members(self, g) -> np.ndarray:
        return np.flatnonzero(self.group_of == g)

    def groups(self) -> list:
        order = np.argsort(self.group_of, kind="stable")
        return np.split(order, np.cumsum(self.sizes)[:-1])

    def reduce(self, values, how="sum") -> np.ndarray:
        """Fold an n-vector onto groups (sum or mean of member entries)."""
        out = np.bincount(self.group_of, weights=values, minlength=self.num_groups)
        if how == "mean":
            out = out / self.sizes
        elif how != "sum":
            raise ValueError(f"unknown reduction {how!r}")
        return out

    def expand(self, group_values) -> np.ndarray:
        return np.asarray(group_values)[self.group_of]


def build_group_map(net: Network, granularity: str = "element") -> GroupMap:
    if granularity not in GRANULARITIES:
        raise ValueError(f"unknown granularity {granularity!r}")
    group_of = np.empty(net.n, dtype=np.int64)
    layer_of = []
    next_id = 0
    for s in net.layout:
        idx = np.arange(s.offset, s.stop)
        if s.kind == "weight" and len(s.shape) == 4 and granularity != "element":
            out_c, in_c, kh, kw = s.shape
            local = idx.reshape(out_c, in_c, kh * kw)
            if granularity == "filter":
                units = [local[o].ravel() for o in range(out_c)]
            else:
                units = [local[:, c].ravel() for c in range(in_c)]
            # channel groups interleave in memory; number them by smallest member
            for unit in sorted(units, key=lambda u: u.min()):
                group_of[unit] = next_id
                layer_of.append(s.layer)
                next_id += 1
        else:
            group_of[idx] = np.arange(next_id, next_id + s.size)
            layer_of.extend([s.layer] * s.size)
            next_id += s.size
    return GroupMap(group_of, np.asarray(layer_of, dtype=np.int64))


def _round_half_up(x):
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SparsityTarget:
    """Pruning ratio p with the retained parameter count k and group count k_G."""

    p: float
    n: int
    num_groups: int

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"pruning ratio must lie in [0, 1), got {self.p}")

    @property
    def k(self) -> int:
        return min(self.n, max(1, _round_half_up((1.0 - self.p) * self.n)))

    @property
    def k_groups(self) -> int:
        return min(self.num_groups, max(1, _round_half_up((1.0 - self.p) * self.num_groups)))


def make_target(p: float, gm: GroupMap) -> SparsityTarget:
    return SparsityTarget(float(p), gm.n, gm.num_groups)


def select_groups(scores, k_groups, layer_of_group=None, per_layer=False) -> np.ndarray:
    """Boolean selection of the ``k_groups`` largest scores; ties go to the
    lower group index."""
    scores = np.asarray(scores, dtype=np.float64)
    chosen = np.zeros(len(scores), dtype=bool)
    if not per_layer:
        order = np.argsort(-scores, kind="stable")
        chosen[order[:k_groups]] = True
        return chosen
    frac = k_groups / len(scores)
    for layer in np.unique(layer_of_group):
        ids = np.flatnonzero(layer_of_group == layer)
        keep = max(1, _round_half_up(frac * len(ids)))
        order = np.argsort(-scores[ids], kind="stable")
        chosen[ids[order[:keep]]] = True
    return chosen


def project_topk(scores, target: SparsityTarget, gm: GroupMap, per_layer=False) -> np.ndarray:
    """Binary parameter mask keeping the top ``k_G`` groups by score."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (gm.num_groups,):
        raise ValueError(f"scores have length {scores.shape}, expected {gm.num_groups}")
    if target.num_groups != gm.num_groups:
        raise ValueError("target was built for a different group map")
    chosen = select_groups(scores, target.k_groups, gm.layer_of_group, per_layer)
    return chosen[gm.group_of].astype(np.int8)


def group_selection(mask, gm: GroupMap) -> np.ndarray:
    """Group-level {0,1} view of an expanded parameter mask."""
    return (gm.reduce(np.asarray(mask, dtype=np.float64)) > 0).astype(np.int8)


def mask_iou(a, b) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask lengths differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def init_scores(theta0, gm: GroupMap) -> np.ndarray:
    """Per-group mean |theta| divided by its maximum over groups."""
    mags = gm.reduce(np.abs(np.asarray(theta0, dtype=np.float64)), how="mean")
    top = mags.max() if len(mags) else 0.0
    if top == 0.0:
        return np.zeros_like(mags)
    return np.clip(mags / top, 0.0, 1.0)


def export_mask_csv(path, scores, mask, gm: GroupMap):
    selected = group_selection(mask, gm)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group_id", "score", "selected"])
        for g, (s, sel) in enumerate(zip(scores, selected)):
            w.writerow([g, repr(float(s)), int(sel)])


def read_mask_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    scores = np.array([float(r["score"]) for r in rows])
    selected = np.array([int(r["selected"]) for r in rows], dtype=np.int8)
    return scores, selected
