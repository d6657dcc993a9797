"""Feature-space datasets, class-incremental task schedules and Dirichlet label partitioning."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation, FormatError, InputError, PartitionInfeasible
from .numerics import RngStream

log = logging.getLogger(__name__)

# stream-id roots under a dataset/partition seed
_MEANS, _TRAIN, _TEST, _PERM, _PART = 0, 1, 2, 3, 4


@dataclass
class FeatureDataset:
    """Labeled feature vectors standing in for frozen-backbone outputs."""

    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ContractViolation(f"features must be (n, d), got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ContractViolation("one label per feature row required")
        if self.num_classes < 1:
            raise InputError("num_classes must be >= 1")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.features)):
            raise InputError("features must be finite")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def subset(self, idx) -> "FeatureDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureDataset(self.features[idx], self.labels[idx], self.num_classes)

    def restrict(self, classes) -> "FeatureDataset":
        """Samples whose label is in ``classes``, in original order."""
        mask = np.isin(self.labels, np.asarray(sorted(classes), dtype=np.int64))
        return self.subset(np.flatnonzero(mask))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# --------------------------------------------------------------------------- #
# Synthetic features
# --------------------------------------------------------------------------- #


@dataclass
class SyntheticSpec:
    num_classes: int
    dim: int
    mean_scale: float = 1.0
    cov_scale: float = 1.0
    samples_per_class: int = 100
    seed: int = 0
    test_per_class: int = 100

    def validate(self) -> None:
        if self.dim < 1:
            raise InputError("dim must be >= 1")
        if self.num_classes < 2:
            raise InputError("need at least 2 classes")
        if self.cov_scale <= 0:
            raise InputError("cov_scale must be > 0")
        if self.samples_per_class < 0 or self.test_per_class < 0:
            raise InputError("sample counts must be >= 0")


def class_means(spec: SyntheticSpec) -> np.ndarray:
    """Per-class Gaussian means: ``mean_scale`` times a standard normal draw per class."""
    g = RngStream(spec.seed, (_MEANS,)).generator
    return spec.mean_scale * g.standard_normal((spec.num_classes, spec.dim))


def synth_generate(spec: SyntheticSpec, split: str = "train") -> FeatureDataset:
    """Balanced isotropic Gaussian classes; ``split='test'`` draws a fresh, disjoint sample."""
    spec.validate()
    if split not in ("train", "test"):
        raise InputError(f"unknown split {split!r}")
    per_class = spec.samples_per_class if split == "train" else spec.test_per_class
    means = class_means(spec)
    g = RngStream(spec.seed, (_TRAIN if split == "train" else _TEST,)).generator
    sd = np.sqrt(spec.cov_scale)
    feats = np.empty((spec.num_classes * per_class, spec.dim))
    labels = np.repeat(np.arange(spec.num_classes), per_class)
    for c in range(spec.num_classes):
        block = slice(c * per_class, (c + 1) * per_class)
        feats[block] = means[c] + sd * g.standard_normal((per_class, spec.dim))
    if per_class == 0:
        log.warning("synthetic spec produced an empty %s split", split)
    return FeatureDataset(feats, labels, spec.num_classes)


# --------------------------------------------------------------------------- #
# Task schedule
# --------------------------------------------------------------------------- #


@dataclass
class TaskSchedule:
    tasks: list[list[int]]

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def seen_through(self, t: int) -> list[int]:
        """Classes introduced in tasks ``0..t`` inclusive, sorted."""
        return sorted(c for task in self.tasks[: t + 1] for c in task)


def schedule_tasks(num_classes: int, num_tasks: int, seed: int) -> TaskSchedule:
    """Seeded class permutation cut into contiguous groups.

    When ``num_tasks`` does not divide ``num_classes`` the first
    ``num_classes % num_tasks`` tasks get one extra class.
    """
    if num_tasks < 1:
        raise InputError("need at least one task")
    if num_tasks > num_classes:
        raise InputError(f"cannot split {num_classes} classes into {num_tasks} tasks")
    perm = RngStream(seed, (_PERM,)).generator.permutation(num_classes)
    base, extra = divmod(num_classes, num_tasks)
    tasks, start = [], 0
    for t in range(num_tasks):
        size = base + (1 if t < extra else 0)
        tasks.append(sorted(int(c) for c in perm[start : start + size]))
        start += size
    return TaskSchedule(tasks)


# --------------------------------------------------------------------------- #
# Dirichlet partition
# --------------------------------------------------------------------------- #


@dataclass
class PartitionSpec:
    num_clients: int
    beta: float
    seed: int = 0
    min_samples_per_client: int = 1
    max_retries: int = 100

    def validate(self) -> None:
        if self.num_clients < 1:
            raise InputError("num_clients must be >= 1")
        if not self.beta > 0:
            raise InputError("beta must be > 0")
        if self.min_samples_per_client < 0 or self.max_retries < 1:
            raise InputError("min_samples_per_client >= 0 and max_retries >= 1 required")


def dirichlet_indices(
    labels: np.ndarray, task_classes, spec: PartitionSpec, task_index: int = 0
) -> list[np.ndarray]:
    """Per-client sample indices (into ``labels``) for one task.

    For every class a share vector ``p ~ Dir(beta * 1_M)`` is drawn and the
    class's samples are routed to clients by a multinomial draw on ``p``. The
    whole draw is repeated on a fresh sub-stream until each client holds at
    least ``min_samples_per_client`` samples.
    """
    spec.validate()
    task_classes = sorted(int(c) for c in task_classes)
    if not task_classes:
        raise InputError("task_classes is empty")
    labels = np.asarray(labels)
    per_class = [np.flatnonzero(labels == c) for c in task_classes]
    missing = [c for c, idx in zip(task_classes, per_class) if idx.size == 0]
    if missing:
        raise InputError(f"dataset has no samples of classes {missing}")

    m = spec.num_clients
    if m == 1:
        return [np.sort(np.concatenate(per_class))]

    for attempt in range(spec.max_retries):
        g = RngStream(spec.seed, (_PART, task_index, attempt)).generator
        buckets: list[list[np.ndarray]] = [[] for _ in range(m)]
        for idx in per_class:
            p = g.dirichlet(np.full(m, spec.beta))
            counts = g.multinomial(idx.size, p)
            shuffled = g.permutation(idx)
            cuts = np.cumsum(counts)[:-1]
            for client, part in enumerate(np.split(shuffled, cuts)):
                buckets[client].append(part)
        shards = [np.sort(np.concatenate(b)) for b in buckets]
        if min(s.size for s in shards) >= spec.min_samples_per_client:
            return shards
    raise PartitionInfeasible(
        f"no valid split for task {task_index} (beta={spec.beta}, M={m}, "
        f"min {spec.min_samples_per_client}/client) after {spec.max_retries} attempts"
    )


def dirichlet_partition(
    ds: FeatureDataset, task_classes, spec: PartitionSpec, task_index: int = 0
) -> list[FeatureDataset]:
    """Split the task's samples of ``ds`` into ``spec.num_clients`` disjoint shards."""
    return [ds.subset(idx) for idx in dirichlet_indices(ds.labels, task_classes, spec, task_index)]


def label_entropy(labels: np.ndarray, num_classes: int) -> float:
    """Entropy (nats) of a label histogram; 0 for an empty shard."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


# --------------------------------------------------------------------------- #
# FCF1 feature files
# --------------------------------------------------------------------------- #

MAGIC = b"FCF1"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIQ")  # magic, version, flags, d, C, n


def _record_dtype(d: int) -> np.dtype:
    return np.dtype([("x", "<f4", (d,)), ("y", "<u2")])


def write_features(ds: FeatureDataset, path) -> None:
    if ds.num_classes > 0xFFFF + 1:
        raise InputError("FCF1 labels are u16; too many classes")
    rec = np.empty(len(ds), dtype=_record_dtype(ds.dim))
    rec["x"] = ds.features.astype("<f4")
    rec["y"] = ds.labels.astype("<u2")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, 0, ds.dim, ds.num_classes, len(ds)))
        f.write(rec.tobytes())


def read_features(path) -> FeatureDataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"truncated header: need {_HEADER.size} bytes, have {len(data)}", len(data))
    magic, version, flags, d, c, n = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected 'FCF1'", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}", 4)
    if flags != 0:
        raise FormatError(f"unsupported flags {flags:#x}", 6)
    if d < 1:
        raise FormatError("feature dimension must be >= 1", 8)
    if c < 1:
        raise FormatError("class count must be >= 1", 12)
    dt = _record_dtype(d)
    expected = _HEADER.size + n * dt.itemsize
    if len(data) < expected:
        whole = (len(data) - _HEADER.size) // dt.itemsize
        raise FormatError(
            f"truncated body: header declares {n} records, file holds {whole}",
            _HEADER.size + whole * dt.itemsize,
        )
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after last record", expected)
    rec = np.frombuffer(data, dtype=dt, count=n, offset=_HEADER.size)
    labels = rec["y"].astype(np.int64)
    bad = np.flatnonzero(labels >= c)
    if bad.size:
        i = int(bad[0])
        off = _HEADER.size + i * dt.itemsize + 4 * d
        raise FormatError(f"record {i} has label {labels[i]} >= C={c}", off)
    feats = rec["x"].astype(np.float64).reshape(n, d)
    if not np.all(np.isfinite(feats)):
        i = int(np.flatnonzero(~np.isfinite(feats).all(axis=1))[0])
        raise FormatError(f"record {i} has non-finite features", _HEADER.size + i * dt.itemsize)
    return FeatureDataset(feats, labels, c)
