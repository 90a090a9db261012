"""Datasets, IDX ingestion and the two-level batch schedule."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class IdxFormatError(ValueError):
    pass


class ConfigError(ValueError):
    """Invalid experiment or optimizer configuration."""


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, self.split)


def make_blobs(classes=4, per_class=250, dim=2, separation=6.0, seed=0):
    """Gaussian clusters centred on a circle of radius ``separation`` in the
    first two coordinates, unit noise in all ``dim`` coordinates.

    Returns (train, test) with an 80/20 split; features are standardized
    with train-split statistics.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if dim < 2:
        raise ValueError("need dim >= 2")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(classes) / classes
    centers = np.zeros((classes, dim))
    centers[:, 0] = separation * np.cos(angles)
    centers[:, 1] = separation * np.sin(angles)
    labels = np.repeat(np.arange(classes), per_class)
    x = centers[labels] + rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    x, labels = x[order], labels[order]
    cut = int(round(0.8 * len(labels)))
    mu = x[:cut].mean(axis=0)
    sd = x[:cut].std(axis=0)
    sd[sd == 0] = 1.0
    x = (x - mu) / sd
    train = Dataset(x[:cut], labels[:cut], classes, "train")
    test = Dataset(x[cut:], labels[cut:], classes, "test")
    return train, test


def _read_header(buf, expected_magic, what):
    if len(buf) < 8:
        raise IdxFormatError(f"{what}: truncated header at byte {len(buf)}")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise IdxFormatError(
            f"{what}: bad magic 0x{magic:08x} at byte 0 (expected 0x{expected_magic:08x})")
    ndim = expected_magic & 0xFF
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise IdxFormatError(f"{what}: truncated dimension block at byte {len(buf)}")
    dims = struct.unpack(f">{ndim}I", buf[4:end])
    payload = int(np.prod(dims))
    if len(buf) < end + payload:
        raise IdxFormatError(
            f"{what}: truncated payload at byte {len(buf)} (need {end + payload})")
    return dims, np.frombuffer(buf, dtype=np.uint8, count=payload, offset=end)


def adaptive_avg_pool(images: np.ndarray, out=8) -> np.ndarray:
    """Average-pool [N, H, W] to [N, out, out] with floor/ceil bin edges."""
    n, h, w = images.shape
    res = np.empty((n, out, out))
    for i in range(out):
        r0, r1 = (i * h) // out, -(-((i + 1) * h) // out)
        for j in range(out):
            c0, c1 = (j * w) // out, -(-((j + 1) * w) // out)
            res[:, i, j] = images[:, r0:r1, c0:c1].mean(axis=(1, 2))
    return res


def load_idx(images_path, labels_path, pool8=False, num_classes=10, split="train") -> Dataset:
    """Read an IDX image/label pair. Pixels are scaled to [0, 1] and returned
    as [N, 1, H, W] (``pool8`` downsamples to 8x8)."""
    with open(images_path, "rb") as fh:
        ibuf = fh.read()
    with open(labels_path, "rb") as fh:
        lbuf = fh.read()
    idims, pixels = _read_header(ibuf, IDX_IMAGES, "images")
    (count,), labels = _read_header(lbuf, IDX_LABELS, "labels")
    if idims[0] != count:
        raise IdxFormatError(f"{idims[0]} images but {count} labels")
    images = pixels.reshape(idims).astype(np.float64) / 255.0
    if pool8:
        images = adaptive_avg_pool(images, 8)
    labels = labels.astype(np.int64)
    num_classes = max(num_classes, int(labels.max()) + 1 if len(labels) else 0)
    return Dataset(images[:, None, :, :], labels, num_classes, split)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray):
    """Write uint8 images [N, H, W] and labels [N] in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES) + struct.pack(">3I", *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS, len(labels)) + labels.tobytes())


SCHEMES = ("random", "same", "reverse")


@dataclass(frozen=True)
class BatchScheduler:
    """Index streams for the lower (B1) and upper (B2) levels.

    Every stream is a pure function of (seed, epoch, step), so two schedulers
    with equal settings produce identical batches.
    """

    size: int
    batch_size: int
    scheme: str = "random"
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown batch scheme {self.scheme!r}")
        if self.batch_size < 1 or self.size < 1:
            raise ConfigError("batch size and dataset size must be positive")

    @property
    def batches_per_epoch(self) -> int:
        return -(-self.size // self.batch_size)

    def _split(self, perm):
        b = self.batch_size
        return [perm[i:i + b] for i in range(0, self.size, b)]

    def lower_batches(self, epoch):
        rng = np.random.default_rng([self.seed, epoch, 0])
        return self._split(rng.permutation(self.size))

    def upper_batches(self, epoch):
        lower = self.lower_batches(epoch)
        if self.scheme == "same":
            return lower
        if self.scheme == "reverse":
            return lower[::-1]
        rng = np.random.default_rng([self.seed, epoch, 1])
        return self._split(rng.permutation(self.size))

    def extra_lower_batch(self, epoch, step, j):
        """Fresh batch for the j-th (j >= 1) extra lower-level step."""
        rng = np.random.default_rng([self.seed, epoch, 2, step, j])
        return rng.choice(self.size, size=min(self.batch_size, self.size), replace=False)


def next_batches(sched: BatchScheduler, epoch: int, step: int):
    """(B1, B2) index arrays for ``step`` of ``epoch``."""
    return sched.lower_batches(epoch)[step], sched.upper_batches(epoch)[step]
