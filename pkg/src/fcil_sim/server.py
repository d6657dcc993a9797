"""Server-side steps: weighted aggregation, the class/client prototype mixture, and head rebalancing."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np
from scipy.special import logsumexp

from .client import ClientParams, GenerativePrototype, LinearClassifier
from .errors import ContractViolation, InputError
from .numerics import RngStream, SgdState, check_finite, sgd_step, softmax_ce

log = logging.getLogger(__name__)

ClassFilter = Literal["all", "old_only", "current_only"]


# --------------------------------------------------------------------------- #
# Aggregation
# --------------------------------------------------------------------------- #


def aggregate(
    params: Sequence[ClientParams],
    sizes: Sequence[int],
    client_ids: Sequence[int] | None = None,
) -> ClientParams:
    """Sample-size weighted mean of client parameters (adapter and head together).

    Terms are accumulated in ascending client order; when ``client_ids`` is
    given the inputs are first sorted by it, so any permutation of the same
    clients gives a bitwise-identical result.
    """
    if not params:
        raise InputError("nothing to aggregate")
    if len(sizes) != len(params):
        raise ContractViolation("one size per client required")
    if any(s < 0 for s in sizes):
        raise InputError("sizes must be >= 0")
    total = sum(int(s) for s in sizes)
    if total == 0:
        raise InputError("all client sizes are zero")
    order = range(len(params)) if client_ids is None else np.argsort(client_ids, kind="stable")
    ref = params[0]
    for p in params:
        if p.adapter.shape != ref.adapter.shape or p.head.W.shape != ref.head.W.shape:
            raise ContractViolation("clients have mismatched parameter shapes")
    if len(params) == 1:
        return ref.copy()

    adapter = np.zeros_like(ref.adapter)
    W = np.zeros_like(ref.head.W)
    b = np.zeros_like(ref.head.b)
    for i in order:
        w = sizes[i] / total
        p = params[i]
        adapter += w * p.adapter
        W += w * p.head.W
        b += w * p.head.b
    return ClientParams(adapter, LinearClassifier(W, b))


# --------------------------------------------------------------------------- #
# Alias tables
# --------------------------------------------------------------------------- #


@dataclass
class AliasTable:
    prob: np.ndarray  # (n,) acceptance probability of column i
    alias: np.ndarray  # (n,) fallback index of column i

    def __len__(self) -> int:
        return self.prob.shape[0]

    def probabilities(self) -> np.ndarray:
        """Categorical distribution implied by the table."""
        n = len(self)
        p = self.prob.copy()
        np.add.at(p, self.alias, 1.0 - self.prob)
        return p / n


def build_alias(weights) -> AliasTable:
    """Walker/Vose alias table for the (unnormalized) ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise InputError("weights must be a non-empty vector")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InputError("weights must be finite and non-negative")
    s = w.sum()
    if not s > 0:
        raise InputError("weights must have positive sum")
    n = w.size
    scaled = w * (n / s)
    prob = np.zeros(n)
    alias = np.arange(n)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s_i = small.pop()
        l_i = large.pop()
        prob[s_i] = scaled[s_i]
        alias[s_i] = l_i
        scaled[l_i] = (scaled[l_i] + scaled[s_i]) - 1.0
        (small if scaled[l_i] < 1.0 else large).append(l_i)
    heaviest = int(np.argmax(w))
    for i in large:
        prob[i] = 1.0
    for i in small:
        # only reachable through rounding; a column must never emit a zero-weight index
        if w[i] > 0:
            prob[i] = 1.0
        else:
            prob[i], alias[i] = 0.0, heaviest
    return AliasTable(prob, alias)


def sample_alias(table: AliasTable, rng: RngStream) -> int:
    """One O(1) draw: a uniform column, then a biased coin between it and its alias."""
    g = rng.generator
    k = int(g.integers(len(table)))
    return k if g.random() < table.prob[k] else int(table.alias[k])


def sample_alias_many(table: AliasTable, rng: RngStream, n: int) -> np.ndarray:
    g = rng.generator
    k = g.integers(len(table), size=n)
    u = g.random(n)
    return np.where(u < table.prob[k], k, table.alias[k])


# --------------------------------------------------------------------------- #
# Hierarchical mixture
# --------------------------------------------------------------------------- #


@dataclass
class HierarchicalMixture:
    """Mixture over classes (weights ``omega``) of mixtures over clients (rows of ``pi``)."""

    omega: np.ndarray  # (C,)
    pi: np.ndarray  # (C, M)
    prototypes: dict[tuple[int, int], GenerativePrototype]  # keyed (class, client)
    class_alias: AliasTable
    client_alias: dict[int, AliasTable] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.omega > 0)]

    @property
    def dim(self) -> int:
        return next(iter(self.prototypes.values())).dim

    def components(self) -> list[tuple[float, GenerativePrototype]]:
        """Flattened (joint weight, prototype) pairs in (class, client) order."""
        return [
            (float(self.omega[c] * self.pi[c, m]), self.prototypes[(c, m)])
            for (c, m) in sorted(self.prototypes)
        ]

    def restrict(self, classes: Iterable[int]) -> "HierarchicalMixture | None":
        keep = set(int(c) for c in classes)
        protos = [p for (c, _), p in self.prototypes.items() if c in keep]
        if not protos:
            return None
        return build_mixture(protos, *self.pi.shape)


def build_mixture(
    prototypes: Iterable[GenerativePrototype],
    num_classes: int | None = None,
    num_clients: int | None = None,
) -> HierarchicalMixture:
    """Class weights proportional to total class counts, client weights to per-client counts."""
    protos = sorted(prototypes, key=lambda p: (p.class_id, p.client_id))
    if not protos:
        raise InputError("need at least one prototype")
    C = num_classes if num_classes is not None else max(p.class_id for p in protos) + 1
    M = num_clients if num_clients is not None else max(p.client_id for p in protos) + 1
    counts = np.zeros((C, M))
    grid: dict[tuple[int, int], GenerativePrototype] = {}
    for p in protos:
        key = (p.class_id, p.client_id)
        if key in grid:
            raise InputError(f"duplicate prototype for class {key[0]}, client {key[1]}")
        if p.count <= 0:
            raise InputError("prototype counts must be positive")
        grid[key] = p
        counts[key] = p.count
    class_totals = counts.sum(axis=1)
    omega = class_totals / class_totals.sum()
    pi = np.zeros_like(counts)
    present = class_totals > 0
    pi[present] = counts[present] / class_totals[present, None]
    client_alias = {int(c): build_alias(pi[c]) for c in np.flatnonzero(present)}
    return HierarchicalMixture(omega, pi, grid, build_alias(omega), client_alias)


def sample_indices(
    mix: HierarchicalMixture, n: int, rng: RngStream, per_class: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (class, client) pairs: class by ``omega`` then client by that class's ``pi`` row.

    With ``per_class`` set the class step is skipped and every class gets
    exactly that many draws.
    """
    if per_class is None:
        cls = sample_alias_many(mix.class_alias, rng, n)
    else:
        cls = np.repeat(np.asarray(mix.classes, dtype=np.int64), per_class)
    clients = np.empty_like(cls)
    for c in np.unique(cls):
        sel = np.flatnonzero(cls == c)
        clients[sel] = sample_alias_many(mix.client_alias[int(c)], rng, sel.size)
    return cls, clients


@dataclass
class SyntheticDataset:
    features: np.ndarray
    labels: np.ndarray
    clients: np.ndarray  # provenance: generating client per sample
    num_classes: int

    def __len__(self) -> int:
        return self.labels.shape[0]

    def restrict(self, classes) -> "SyntheticDataset":
        mask = np.isin(self.labels, np.asarray(sorted(classes), dtype=np.int64))
        return SyntheticDataset(self.features[mask], self.labels[mask], self.clients[mask], self.num_classes)


def _draw_features(
    mix: HierarchicalMixture, cls: np.ndarray, clients: np.ndarray, cov_scale: float, rng: RngStream
) -> np.ndarray:
    keys = sorted(mix.prototypes)
    key_index = {k: i for i, k in enumerate(keys)}
    means = np.stack([mix.prototypes[k].mean for k in keys])
    sds = np.sqrt(cov_scale * np.stack([mix.prototypes[k].var_diag for k in keys]))
    comp = np.fromiter(
        (key_index[(int(c), int(m))] for c, m in zip(cls, clients)), np.int64, cls.shape[0]
    )
    z = rng.generator.standard_normal((cls.shape[0], mix.dim))
    return means[comp] + sds[comp] * z


def sample_synthetic(
    mix: HierarchicalMixture,
    per_class: int = 256,
    cov_scale: float = 3.0,
    rng: RngStream | None = None,
    exact_per_class: bool = False,
) -> SyntheticDataset:
    """Synthetic features from the mixture with every covariance multiplied by ``cov_scale``.

    By default ``per_class * n_classes`` samples go through the full hierarchy,
    so each class receives ``per_class`` samples on average.
    """
    if per_class < 1 or not cov_scale > 0:
        raise InputError("per_class >= 1 and cov_scale > 0 required")
    if rng is None:
        raise InputError("an RngStream is required")
    n = per_class * len(mix.classes)
    cls, clients = sample_indices(mix, n, rng, per_class if exact_per_class else None)
    feats = _draw_features(mix, cls, clients, cov_scale, rng)
    return SyntheticDataset(feats, cls.astype(np.int64), clients.astype(np.int64), mix.pi.shape[0])


# --------------------------------------------------------------------------- #
# Rebalancing
# --------------------------------------------------------------------------- #


@dataclass
class RebalanceConfig:
    per_class: int = 256
    cov_scale: float = 3.0
    epochs: int = 5
    batch: int = 256
    lr: float = 0.01
    momentum: float = 0.9
    schedule: str = "cosine"
    class_filter: str = "all"
    exact_per_class: bool = False


def filter_classes(
    synth: SyntheticDataset, class_filter: str, current_classes: Iterable[int] | None
) -> SyntheticDataset:
    if class_filter == "all":
        return synth
    if current_classes is None:
        raise InputError(f"class_filter={class_filter!r} needs the current task's classes")
    current = set(int(c) for c in current_classes)
    present = set(int(c) for c in np.unique(synth.labels))
    if class_filter == "current_only":
        return synth.restrict(present & current)
    if class_filter == "old_only":
        return synth.restrict(present - current)
    raise InputError(f"unknown class_filter {class_filter!r}")


def rebalance(
    head: LinearClassifier,
    synth: SyntheticDataset,
    rng: RngStream,
    current_classes: Iterable[int] | None = None,
    class_filter: str = "all",
    epochs: int = 5,
    batch: int = 256,
    lr: float = 0.01,
    momentum: float = 0.9,
    schedule: str = "cosine",
) -> LinearClassifier:
    """Retrain the head on synthetic features with cross-entropy over the sampled classes.

    Only rows of classes that survive ``class_filter`` take part in the softmax
    and get updated. An empty filtered set is a logged no-op.
    """
    data = filter_classes(synth, class_filter, current_classes)
    new = head.copy()
    if len(data) == 0:
        log.warning("rebalance skipped: no synthetic samples left after class_filter=%s", class_filter)
        return new
    cls = np.unique(data.labels)
    remap = np.full(head.num_classes, -1, dtype=np.int64)
    remap[cls] = np.arange(cls.size)
    n = len(data)
    steps_per_epoch = math.ceil(n / batch)
    st_w = SgdState(lr, momentum, schedule, epochs * steps_per_epoch)
    st_b = st_w.fresh()
    W, b = new.W[cls], new.b[cls]
    step = 0
    for _ in range(epochs):
        order = rng.generator.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            h = data.features[idx]
            _, g = softmax_ce(h @ W.T + b, remap[data.labels[idx]])
            W = sgd_step(W, g.T @ h, st_w, step)
            b = sgd_step(b, g.sum(axis=0), st_b, step)
            step += 1
    check_finite(W, "rebalanced head")
    new.W[cls] = W
    new.b[cls] = b
    return new


# --------------------------------------------------------------------------- #
# Densities and Monte-Carlo KL
# --------------------------------------------------------------------------- #


def diag_gaussian_logpdf(x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    d = mean.shape[0]
    return -0.5 * (
        d * math.log(2 * math.pi) + np.log(var).sum() + (((x - mean) ** 2) / var).sum(axis=1)
    )


def mixture_logpdf(
    x: np.ndarray, components: Sequence[tuple[float, GenerativePrototype]], cov_scale: float = 1.0
) -> np.ndarray:
    """Log density of a weighted diagonal-Gaussian mixture at the rows of ``x``."""
    comps = [(w, p) for w, p in components if w > 0]
    if not comps:
        raise InputError("mixture has no positive-weight component")
    table = np.stack(
        [math.log(w) + diag_gaussian_logpdf(x, p.mean, cov_scale * p.var_diag) for w, p in comps]
    )
    return logsumexp(table, axis=0)


def mc_kl_divergence(
    p: HierarchicalMixture,
    q_components: Sequence[tuple[float, GenerativePrototype]],
    n: int,
    rng: RngStream,
) -> tuple[float, float]:
    """Monte-Carlo ``KL(p || q)`` in nats with its standard error.

    Samples come from ``p`` through the hierarchical sampler; the estimate is
    the mean log-density ratio.
    """
    if n < 2:
        raise InputError("need at least 2 draws for a standard error")
    cls, clients = sample_indices(p, n, rng)
    x = _draw_features(p, cls, clients, 1.0, rng)
    ratio = mixture_logpdf(x, p.components()) - mixture_logpdf(x, q_components)
    return float(ratio.mean()), float(ratio.std(ddof=1) / math.sqrt(n))


# --------------------------------------------------------------------------- #
# Snapshot
# --------------------------------------------------------------------------- #


def mixture_snapshot(mix: HierarchicalMixture) -> dict:
    return {
        "prototypes": [
            {
                "class": c,
                "client": m,
                "count": p.count,
                "mean": p.mean.tolist(),
                "var": p.var_diag.tolist(),
            }
            for (c, m), p in sorted(mix.prototypes.items())
        ],
        "omega": mix.omega.tolist(),
        "pi": mix.pi.tolist(),
    }


def write_snapshot(mix: HierarchicalMixture, path) -> None:
    with open(path, "w") as f:
        json.dump(mixture_snapshot(mix), f, indent=1, sort_keys=True)
