"""Client-side work: local training of adapter + head, generative prototypes, response histograms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datasets import FeatureDataset
from .errors import ContractViolation, InputError, SimError
from .numerics import Optimizer, RngStream, check_finite, optimizer_step, softmax_ce

VAR_FLOOR = 1e-6


class SkipClient(SimError):
    """The client has nothing to train on this round and contributes no update."""


@dataclass
class LinearClassifier:
    W: np.ndarray  # (C, d)
    b: np.ndarray  # (C,)

    @classmethod
    def zeros(cls, num_classes: int, dim: int) -> "LinearClassifier":
        return cls(np.zeros((num_classes, dim)), np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    def logits(self, h: np.ndarray) -> np.ndarray:
        return h @ self.W.T + self.b

    def copy(self) -> "LinearClassifier":
        return LinearClassifier(self.W.copy(), self.b.copy())


@dataclass
class ClientParams:
    """Trainable state exchanged with the server: adapter (possibly empty) and head.

    A non-empty adapter is a row-major ``d x d`` matrix ``A`` applied as ``h = A x``.
    """

    adapter: np.ndarray
    head: LinearClassifier

    @classmethod
    def init(cls, num_classes: int, dim: int, adapter: bool = False) -> "ClientParams":
        a = np.eye(dim).ravel() if adapter else np.zeros(0)
        return cls(a, LinearClassifier.zeros(num_classes, dim))

    @property
    def has_adapter(self) -> bool:
        return self.adapter.size > 0

    def adapter_matrix(self) -> np.ndarray:
        d = self.head.dim
        if self.adapter.size != d * d:
            raise ContractViolation(f"adapter has {self.adapter.size} entries, expected {d * d}")
        return self.adapter.reshape(d, d)

    def features(self, x: np.ndarray) -> np.ndarray:
        if not self.has_adapter:
            return x
        return x @ self.adapter_matrix().T

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.head.logits(self.features(x))

    def copy(self) -> "ClientParams":
        return ClientParams(self.adapter.copy(), self.head.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.adapter, self.head.W.ravel(), self.head.b])

    def num_floats(self) -> int:
        return self.adapter.size + self.head.W.size + self.head.b.size


def predict(params: ClientParams, x: np.ndarray, classes: Sequence[int] | None = None) -> np.ndarray:
    """Argmax class ids; ties go to the lowest class id. ``classes`` restricts the candidates."""
    logits = params.logits(x)
    if classes is None:
        return np.argmax(logits, axis=1)
    cls = np.asarray(sorted(classes), dtype=np.int64)
    return cls[np.argmax(logits[:, cls], axis=1)]


def accuracy(params: ClientParams, ds: FeatureDataset, classes=None) -> float:
    if ds.is_empty:
        raise InputError("accuracy on an empty dataset")
    return float(np.mean(predict(params, ds.features, classes) == ds.labels))


def loss_and_grads(
    params: ClientParams, x: np.ndarray, y: np.ndarray, classes: np.ndarray | None = None
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Mean CE and its gradients w.r.t. (flat adapter, W, b).

    ``classes`` (sorted ids) restricts the softmax to those logits; every
    label in ``y`` must be among them.
    """
    h = params.features(x)
    logits = params.head.logits(h)
    if classes is None:
        loss, g = softmax_ce(logits, y)
    else:
        remap = np.full(params.head.num_classes, -1, dtype=np.int64)
        remap[classes] = np.arange(classes.size)
        loss, g_local = softmax_ce(logits[:, classes], remap[y])
        g = np.zeros_like(logits)
        g[:, classes] = g_local
    grad_w = g.T @ h
    grad_b = g.sum(axis=0)
    grad_a = ((g @ params.head.W).T @ x).ravel() if params.has_adapter else np.zeros(0)
    return loss, grad_a, grad_w, grad_b


def local_train(
    params: ClientParams,
    shard: FeatureDataset,
    epochs: int,
    batch: int,
    opt: Optimizer,
    rng: RngStream,
    masked: bool = True,
) -> ClientParams:
    """Minibatch CE training on one client's shard, starting from ``params`` (not modified).

    ``opt`` is a template: every trainable tensor gets a fresh copy of it. With
    ``masked=True`` the softmax only spans classes present in the shard, so
    rows of absent classes receive exactly zero gradient.
    """
    if shard.is_empty:
        raise SkipClient("empty shard")
    if epochs < 1 or batch < 1:
        raise InputError("epochs and batch must be >= 1")
    if shard.dim != params.head.dim:
        raise ContractViolation(f"shard dim {shard.dim} != head dim {params.head.dim}")

    p = params.copy()
    x_all, y_all = shard.features, shard.labels
    n = len(shard)
    local = np.asarray(shard.classes(), dtype=np.int64)

    st_w, st_b = opt.fresh(), opt.fresh()
    st_a = opt.fresh() if p.has_adapter else None
    step = 0
    for _ in range(epochs):
        order = rng.generator.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            x, y = x_all[idx], y_all[idx]
            _, grad_a, grad_w, grad_b = loss_and_grads(p, x, y, local if masked else None)
            if st_a is not None:
                p.adapter = optimizer_step(p.adapter, grad_a, st_a, step)
            p.head.W = optimizer_step(p.head.W, grad_w, st_w, step)
            p.head.b = optimizer_step(p.head.b, grad_b, st_b, step)
            step += 1
        check_finite(p.flat(), "client parameters after local epoch")
    return p


# --------------------------------------------------------------------------- #
# Prototypes
# --------------------------------------------------------------------------- #


@dataclass
class GenerativePrototype:
    client_id: int
    class_id: int
    mean: np.ndarray
    var_diag: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def compute_prototypes(
    shard: FeatureDataset,
    client_id: int,
    params: ClientParams | None = None,
    var_floor: float = VAR_FLOOR,
    ddof: int = 0,
) -> list[GenerativePrototype]:
    """One diagonal Gaussian per locally present class, fitted on (adapted) features.

    Rows are sorted lexicographically before summation, which makes the result
    exactly invariant to sample order.
    """
    if shard.is_empty:
        raise InputError("cannot fit prototypes on an empty shard")
    feats = shard.features if params is None else params.features(shard.features)
    protos = []
    for c in shard.classes():
        rows = feats[shard.labels == c]
        rows = rows[np.lexsort(rows.T[::-1])]
        n = rows.shape[0]
        mean = rows.sum(axis=0) / n
        if n - ddof > 0:
            var = ((rows - mean) ** 2).sum(axis=0) / (n - ddof)
        else:
            var = np.zeros_like(mean)
        protos.append(GenerativePrototype(client_id, c, mean, np.maximum(var, var_floor), n))
    return protos


def response_histogram(params: ClientParams, eval_set: FeatureDataset, classes=None) -> np.ndarray:
    """Fraction of ``eval_set`` predicted as each class (length C, sums to 1)."""
    if eval_set.is_empty:
        raise InputError("eval_set is empty")
    pred = predict(params, eval_set.features, classes)
    return np.bincount(pred, minlength=params.head.num_classes) / len(eval_set)
