"""Diagnostics: final average accuracy, response entropy, feature bias, JSD, communication cost."""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import InputError, UndefinedMetric

BYTES_PER_FLOAT = 4  # float32 on the wire


# --------------------------------------------------------------------------- #
# Accuracy
# --------------------------------------------------------------------------- #


class AccuracyMatrix:
    """``A[i, j]``: accuracy on task ``i`` after incremental step ``j`` (``i <= j``); NaN if unset."""

    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise InputError("num_tasks must be >= 1")
        self.values = np.full((num_tasks, num_tasks), np.nan)

    @classmethod
    def from_list(cls, rows) -> "AccuracyMatrix":
        arr = np.array([[np.nan if v is None else v for v in r] for r in rows], dtype=np.float64)
        m = cls(arr.shape[0])
        m.values[:] = arr
        return m

    @property
    def num_tasks(self) -> int:
        return self.values.shape[0]

    def set(self, task: int, step: int, acc: float) -> None:
        if task > step:
            raise InputError(f"task {task} not yet observed at step {step}")
        if not 0.0 <= acc <= 1.0:
            raise InputError(f"accuracy {acc} outside [0, 1]")
        self.values[task, step] = acc

    def final_column(self) -> np.ndarray:
        return self.values[:, -1]

    def to_list(self) -> list[list[float | None]]:
        return [[None if math.isnan(v) else float(v) for v in row] for row in self.values]


def faa(A: AccuracyMatrix | np.ndarray | Sequence[float]) -> float:
    """Mean of the last column: average accuracy over all tasks after the final step."""
    if isinstance(A, AccuracyMatrix):
        col = A.final_column()
    else:
        arr = np.asarray(A, dtype=np.float64)
        col = arr[:, -1] if arr.ndim == 2 else arr
    if col.size == 0 or np.any(np.isnan(col)):
        raise InputError("final column of the accuracy matrix is incomplete")
    return math.fsum(col.tolist()) / col.size


# --------------------------------------------------------------------------- #
# Bias measures
# --------------------------------------------------------------------------- #


def bias_entropy(hist) -> float:
    """Shannon entropy in nats of a prediction histogram, with 0 ln 0 = 0."""
    p = np.asarray(hist, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InputError("histogram must be a non-empty vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise InputError("histogram must be non-negative and sum to 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def feature_bias(means: Mapping[int, Mapping[int, np.ndarray]]) -> float:
    """Mean pairwise Euclidean distance between clients' prototype means.

    ``means[client][class]`` is a mean vector. For each class held by at least
    two clients the pairwise distances are averaged, then those per-class
    values are averaged.
    """
    by_class: dict[int, list[np.ndarray]] = {}
    for client in sorted(means):
        for c, mu in sorted(means[client].items()):
            by_class.setdefault(c, []).append(np.asarray(mu, dtype=np.float64))
    per_class = []
    for c in sorted(by_class):
        vecs = by_class[c]
        if len(vecs) < 2:
            continue
        dists = [float(np.linalg.norm(a - b)) for a, b in itertools.combinations(vecs, 2)]
        per_class.append(sum(dists) / len(dists))
    if not per_class:
        raise UndefinedMetric("no class is shared by two or more clients")
    return sum(per_class) / len(per_class)


def discrete_jsd(dists, weights) -> float:
    """Weighted generalized JSD of categoricals, ``sum_m w_m KL(Q_m || sum_k w_k Q_k)``, in nats."""
    try:
        Q = np.asarray(dists, dtype=np.float64)
    except ValueError as e:
        raise InputError("distributions must share one support (equal lengths)") from e
    w = np.asarray(weights, dtype=np.float64)
    if Q.ndim != 2:
        raise InputError("distributions must share one support (equal lengths)")
    if w.shape != (Q.shape[0],):
        raise InputError("one weight per distribution required")
    if np.any(Q < 0) or np.any(np.abs(Q.sum(axis=1) - 1.0) > 1e-9):
        raise InputError("each distribution must be normalized")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise InputError("weights must be normalized")
    G = w @ Q
    total = 0.0
    for wm, q in zip(w, Q):
        nz = q > 0
        total += wm * float((q[nz] * np.log(q[nz] / G[nz])).sum())
    return max(total, 0.0)


# --------------------------------------------------------------------------- #
# Communication accounting
# --------------------------------------------------------------------------- #


@dataclass
class CommEntry:
    """Bytes exchanged between one client and the server in one round."""

    adapter_floats: int
    head_floats: int
    prototype_floats: int
    uplink_bytes: int
    downlink_bytes: int
    header_bytes: int = 0


def comm_cost(
    adapter_floats: int,
    head_floats: int,
    num_prototypes: int,
    dim: int,
    header_bytes: int = 0,
) -> CommEntry:
    """Uplink carries adapter, head and prototypes (mean, variance, count); downlink adapter and head."""
    if min(adapter_floats, head_floats, num_prototypes, dim, header_bytes) < 0:
        raise InputError("counts must be non-negative")
    proto = num_prototypes * (2 * dim + 1)
    up = BYTES_PER_FLOAT * (adapter_floats + head_floats + proto) + header_bytes
    down = BYTES_PER_FLOAT * (adapter_floats + head_floats) + header_bytes
    return CommEntry(adapter_floats, head_floats, proto, up, down, header_bytes)


@dataclass
class CommLedger:
    entries: list[dict] = field(default_factory=list)

    def record(self, task: int, round_: int, client: int, entry: CommEntry) -> None:
        self.entries.append({"task": task, "round": round_, "client": client, **asdict(entry)})

    def totals(self) -> dict:
        up = sum(e["uplink_bytes"] for e in self.entries)
        down = sum(e["downlink_bytes"] for e in self.entries)
        return {"uplink_bytes": up, "downlink_bytes": down, "total_bytes": up + down}

    def per_round_client_mb(self) -> float:
        """Mean megabytes (1e6 bytes) exchanged by one client in one round."""
        if not self.entries:
            return 0.0
        t = self.totals()["total_bytes"]
        return t / len(self.entries) / 1e6


# Reference ViT-B/16 sizes for the parameter-efficiency check.
VIT_B16_BACKBONE_PARAMS = 85_798_656  # ViT-B/16 without classification head
VIT_B16_DIM = 768


def prompt_param_count(tokens: int = 200, dim: int = VIT_B16_DIM, layers: int = 5) -> int:
    """Prefix prompt size: a key and a value prompt of ``tokens x dim`` per conditioned layer."""
    return tokens * dim * 2 * layers


def adapter_fraction(
    adapter_params: int, backbone_params: int = VIT_B16_BACKBONE_PARAMS, head_params: int = 0
) -> float:
    return adapter_params / (backbone_params + adapter_params + head_params)


def sampling_flops(dim: int) -> int:
    """Arithmetic per synthetic draw: two categorical lookups and one scale-and-shift per coordinate."""
    return 2 + dim
