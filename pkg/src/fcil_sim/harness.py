"""Config-driven orchestration of the federated class-incremental protocol.

One run walks tasks, and within each task communication rounds of
distribute -> local training -> prototypes -> aggregation -> mixture ->
synthetic sampling -> head rebalancing. Every random choice comes from an
``RngStream`` keyed by (master seed, purpose, task, round, client), so a run is
a pure function of its config.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .client import (
    ClientParams,
    SkipClient,
    accuracy,
    compute_prototypes,
    local_train,
    response_histogram,
)
from .datasets import (
    FeatureDataset,
    PartitionSpec,
    SyntheticSpec,
    dirichlet_partition,
    read_features,
    schedule_tasks,
    synth_generate,
)
from .errors import ConfigError, NumericalError, UndefinedMetric
from .metrics import AccuracyMatrix, CommLedger, bias_entropy, comm_cost, faa, feature_bias
from .numerics import AdamState, RngStream, SgdState
from .server import aggregate, build_mixture, rebalance, sample_synthetic

log = logging.getLogger(__name__)

# stream roots
LOCAL_TRAIN, SELECTION, SYNTH_SAMPLING, REBALANCE = 10, 11, 12, 13

# knobs that change how a run executes but not what it computes; kept out of reports
_EXECUTION_ONLY = ("workers", "out_dir")


@dataclass
class RunConfig:
    # data
    source: str = "synthetic"
    train_file: str | None = None
    test_file: str | None = None
    num_classes: int = 10
    dim: int = 64
    mean_scale: float = 1.0
    data_cov_scale: float = 1.0
    samples_per_class: int = 200
    test_per_class: int = 100
    # protocol
    num_tasks: int = 5
    num_clients: int = 10
    beta: float = 0.5
    min_samples_per_client: int = 1
    partition_retries: int = 100
    rounds_per_task: int = 5
    participation_rate: float = 1.0
    # local training
    local_epochs: int = 5
    local_batch: int = 16
    local_optimizer: str = "adam"
    local_lr: float = 0.003
    local_momentum: float = 0.0
    masking: str = "masked"
    adapter: bool = False
    var_floor: float = 1e-6
    variance_ddof: int = 0
    # server rebalancing
    rebalance: bool = True
    rebalance_per_class: int = 256
    rebalance_cov_scale: float = 3.0
    rebalance_epochs: int = 5
    rebalance_lr: float = 0.01
    rebalance_momentum: float = 0.9
    rebalance_batch: int = 256
    rebalance_schedule: str = "cosine"
    rebalance_exact_per_class: bool = False
    class_filter: str = "all"
    # accounting / execution
    header_bytes: int = 0
    seed: int = 0
    workers: int = 1
    out_dir: str | None = None

    def validate(self) -> "RunConfig":
        positive = (
            "num_classes", "dim", "num_tasks", "num_clients", "rounds_per_task", "local_epochs",
            "local_batch", "rebalance_per_class", "rebalance_epochs", "rebalance_batch",
            "partition_retries", "workers",
        )  # fmt: skip
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.beta > 0:
            raise ConfigError("beta must be > 0")
        if not 0 < self.participation_rate <= 1:
            raise ConfigError("participation_rate must lie in (0, 1]")
        if self.source not in ("synthetic", "file"):
            raise ConfigError(f"unknown source {self.source!r}")
        if self.source == "file" and not (self.train_file and self.test_file):
            raise ConfigError("file source needs train_file and test_file")
        if self.local_optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown local_optimizer {self.local_optimizer!r}")
        if self.masking not in ("masked", "unmasked"):
            raise ConfigError(f"unknown masking {self.masking!r}")
        if self.class_filter not in ("all", "old_only", "current_only"):
            raise ConfigError(f"unknown class_filter {self.class_filter!r}")
        if self.rebalance_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown rebalance_schedule {self.rebalance_schedule!r}")
        if self.num_tasks > self.num_classes:
            raise ConfigError("more tasks than classes")
        if min(self.samples_per_class, self.test_per_class, self.min_samples_per_client, self.seed) < 0:
            raise ConfigError("counts and seed must be non-negative")
        if not (self.rebalance_cov_scale > 0 and self.var_floor > 0 and self.data_cov_scale > 0):
            raise ConfigError("covariance scales and variance floor must be > 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d).validate()
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw).validate()

    def echo(self) -> dict:
        d = dataclasses.asdict(self)
        for k in _EXECUTION_ONLY:
            d.pop(k)
        return d


# Synthetic benchmark used by the studies and acceptance checks: strongly
# non-IID (beta 0.05 with two classes per task leaves many clients empty, so the
# per-client minimum is 0) and overlapping classes, so the head's bias shows.
BENCHMARK = {
    "num_classes": 10,
    "dim": 64,
    "num_tasks": 5,
    "num_clients": 10,
    "beta": 0.05,
    "min_samples_per_client": 0,
    "mean_scale": 0.3,
    "samples_per_class": 1000,
    "test_per_class": 300,
    "local_lr": 0.01,
}


def benchmark_config(**overrides) -> "RunConfig":
    return RunConfig.from_dict(BENCHMARK | overrides)


# --------------------------------------------------------------------------- #
# Helpers
# --------------------------------------------------------------------------- #


def load_data(cfg: RunConfig) -> tuple[FeatureDataset, FeatureDataset]:
    if cfg.source == "file":
        train, test = read_features(cfg.train_file), read_features(cfg.test_file)
        if train.dim != test.dim or train.num_classes != test.num_classes:
            raise ConfigError("train and test feature files disagree on d or C")
        if train.dim != cfg.dim or train.num_classes != cfg.num_classes:
            raise ConfigError(
                f"feature files have d={train.dim}, C={train.num_classes}; "
                f"config says d={cfg.dim}, C={cfg.num_classes}"
            )
        return train, test
    spec = synthetic_spec(cfg)
    return synth_generate(spec, "train"), synth_generate(spec, "test")


def synthetic_spec(cfg: RunConfig) -> SyntheticSpec:
    return SyntheticSpec(
        num_classes=cfg.num_classes,
        dim=cfg.dim,
        mean_scale=cfg.mean_scale,
        cov_scale=cfg.data_cov_scale,
        samples_per_class=cfg.samples_per_class,
        seed=cfg.seed,
        test_per_class=cfg.test_per_class,
    )


def partition_spec(cfg: RunConfig, beta: float | None = None) -> PartitionSpec:
    return PartitionSpec(
        cfg.num_clients,
        cfg.beta if beta is None else beta,
        cfg.seed,
        cfg.min_samples_per_client,
        cfg.partition_retries,
    )


def local_optimizer(cfg: RunConfig):
    if cfg.local_optimizer == "adam":
        return AdamState(cfg.local_lr)
    return SgdState(cfg.local_lr, cfg.local_momentum)


def client_stream(seed: int, task: int, round_: int, client: int) -> RngStream:
    return RngStream(seed, (LOCAL_TRAIN, task, round_, client))


def select_clients(cfg: RunConfig, task: int, round_: int) -> list[int]:
    """``ceil(rate * M)`` clients drawn uniformly without replacement, ascending."""
    m = cfg.num_clients
    k = math.ceil(cfg.participation_rate * m - 1e-12)
    if k >= m:
        return list(range(m))
    g = RngStream(cfg.seed, (SELECTION, task, round_)).generator
    return sorted(int(i) for i in g.choice(m, size=k, replace=False))


def params_digest(p: ClientParams) -> str:
    return hashlib.sha256(p.flat().tobytes()).hexdigest()[:16]


def mean_entropy(params: ClientParams, test: FeatureDataset, classes) -> float:
    return bias_entropy(response_histogram(params, test, classes))


def _train_one(cfg: RunConfig, global_params: ClientParams, shard: FeatureDataset, t: int, r: int, m: int):
    try:
        p = local_train(
            global_params,
            shard,
            cfg.local_epochs,
            cfg.local_batch,
            local_optimizer(cfg),
            client_stream(cfg.seed, t, r, m),
            masked=cfg.masking == "masked",
        )
    except SkipClient:
        return None
    protos = compute_prototypes(shard, m, p, cfg.var_floor, cfg.variance_ddof)
    return p, protos


def _round_value(x):
    return None if x is None else float(x)


# --------------------------------------------------------------------------- #
# Run
# --------------------------------------------------------------------------- #


@dataclass
class RunReport:
    config: dict
    seed: int
    rounds: list[dict]
    accuracy_matrix: list[list[float | None]]
    faa: float
    comm: dict
    version: str = __version__
    entropy_unit: str = "nats"
    schedule: list[list[int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def check_consistency(self) -> None:
        recomputed = faa(AccuracyMatrix.from_list(self.accuracy_matrix))
        if abs(recomputed - self.faa) > 1e-12:
            raise ValueError(f"stored FAA {self.faa} != recomputed {recomputed}")

    @classmethod
    def load(cls, path) -> "RunReport":
        data = json.loads(Path(path).read_text())
        report = cls(**data)
        report.check_consistency()
        return report

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "rounds.jsonl", "w") as f:
            for rec in self.rounds:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        path = out / "report.json"
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")
        return path


def run(cfg: RunConfig, data: tuple[FeatureDataset, FeatureDataset] | None = None) -> RunReport:
    """Execute every task and round of the protocol and return the report.

    Accuracy on each observed task is measured at task boundaries, after the
    last round's rebalancing, with predictions restricted to classes seen so far.
    """
    return run_with_params(cfg, data)[0]


def run_with_params(
    cfg: RunConfig, data: tuple[FeatureDataset, FeatureDataset] | None = None
) -> tuple[RunReport, ClientParams]:
    """Like ``run`` but also hands back the final global model."""
    cfg.validate()
    train, test = data if data is not None else load_data(cfg)
    C, d, M = cfg.num_classes, train.dim, cfg.num_clients
    schedule = schedule_tasks(C, cfg.num_tasks, cfg.seed)
    global_params = ClientParams.init(C, d, cfg.adapter)
    store = {}  # (class, client) -> latest prototype
    A = AccuracyMatrix(cfg.num_tasks)
    ledger = CommLedger()
    rounds = []

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        for t, current in enumerate(schedule.tasks):
            seen = schedule.seen_through(t)
            shards = dirichlet_partition(train, current, partition_spec(cfg), t)
            test_seen = test.restrict(seen)
            for r in range(cfg.rounds_per_task):
                try:
                    rec, global_params = _one_round(
                        cfg, pool, global_params, shards, store, ledger, t, r, current, seen, test_seen
                    )
                except FloatingPointError as e:  # includes NumericalError
                    raise NumericalError(f"task {t}, round {r}: {e}") from e
                rounds.append(rec)
                log.info("task %d round %d acc %.4f", t, r, rec["global_acc_post"])
            for i in range(t + 1):
                task_test = test.restrict(schedule.tasks[i])
                A.set(i, t, accuracy(global_params, task_test, seen))

    report = RunReport(
        config=cfg.echo(),
        seed=cfg.seed,
        rounds=rounds,
        accuracy_matrix=A.to_list(),
        faa=faa(A),
        comm=ledger.totals() | {"mb_per_client_round": ledger.per_round_client_mb()},
        schedule=schedule.tasks,
    )
    return report, global_params


def _one_round(cfg, pool, global_params, shards, store, ledger, t, r, current, seen, test_seen):
    selected = select_clients(cfg, t, r)
    results = list(pool.map(lambda m: _train_one(cfg, global_params, shards[m], t, r, m), selected))

    trained, sizes, ids, client_means, client_entropy = [], [], [], {}, []
    for m, res in zip(selected, results):
        n_protos = 0
        if res is not None:
            p, protos = res
            trained.append(p)
            sizes.append(len(shards[m]))
            ids.append(m)
            for proto in protos:
                store[(proto.class_id, m)] = proto
            client_means[m] = {proto.class_id: proto.mean for proto in protos}
            client_entropy.append(mean_entropy(p, test_seen, seen))
            n_protos = len(protos)
        ledger.record(
            t, r, m,
            comm_cost(global_params.adapter.size, global_params.head.W.size + global_params.head.b.size,
                      n_protos, global_params.head.dim, cfg.header_bytes),
        )  # fmt: skip

    if trained:
        global_params = aggregate(trained, sizes, ids)
    digest_pre = params_digest(global_params)
    acc_pre = accuracy(global_params, test_seen, seen)
    ent_pre = mean_entropy(global_params, test_seen, seen)

    # the first task has no old classes, so CR_old has nothing to do there
    if cfg.rebalance and store and not (cfg.class_filter == "old_only" and t == 0):
        mix = build_mixture(store.values(), cfg.num_classes, cfg.num_clients)
        synth = sample_synthetic(
            mix,
            cfg.rebalance_per_class,
            cfg.rebalance_cov_scale,
            RngStream(cfg.seed, (SYNTH_SAMPLING, t, r)),
            exact_per_class=cfg.rebalance_exact_per_class,
        )
        head = rebalance(
            global_params.head,
            synth,
            RngStream(cfg.seed, (REBALANCE, t, r)),
            current_classes=current,
            class_filter=cfg.class_filter,
            epochs=cfg.rebalance_epochs,
            batch=cfg.rebalance_batch,
            lr=cfg.rebalance_lr,
            momentum=cfg.rebalance_momentum,
            schedule=cfg.rebalance_schedule,
        )
        global_params = ClientParams(global_params.adapter, head)

    try:
        fb = feature_bias(client_means)
    except UndefinedMetric:
        fb = None
    rec = {
        "task": t,
        "round": r,
        "selected": selected,
        "trained": ids,
        "params_digest_pre": digest_pre,
        "global_acc_pre": acc_pre,
        "global_acc_post": accuracy(global_params, test_seen, seen),
        "entropy_pre": ent_pre,
        "entropy_post": mean_entropy(global_params, test_seen, seen),
        "client_entropy_mean": _round_value(np.mean(client_entropy)) if client_entropy else None,
        "feature_bias": _round_value(fb),
        "uplink_bytes": sum(e["uplink_bytes"] for e in ledger.entries if (e["task"], e["round"]) == (t, r)),
        "downlink_bytes": sum(e["downlink_bytes"] for e in ledger.entries if (e["task"], e["round"]) == (t, r)),
    }
    return rec, global_params


# --------------------------------------------------------------------------- #
# Studies
# --------------------------------------------------------------------------- #


def local_bias(cfg: RunConfig, train: FeatureDataset, test: FeatureDataset, beta: float) -> dict:
    """Client models after local training from the initial model, before any synchronization.

    Returns mean response entropy over clients and mean feature bias.
    """
    classes = list(range(cfg.num_classes))
    shards = dirichlet_partition(train, classes, partition_spec(cfg, beta), 0)
    init = ClientParams.init(cfg.num_classes, train.dim, cfg.adapter)
    entropies, means = [], {}
    for m, shard in enumerate(shards):
        res = _train_one(cfg, init, shard, 0, 0, m)
        if res is None:
            continue
        p, protos = res
        entropies.append(mean_entropy(p, test, classes))
        means[m] = {q.class_id: q.mean for q in protos}
    try:
        fb = feature_bias(means)
    except UndefinedMetric:
        fb = None
    return {"entropy": float(np.mean(entropies)), "feature_bias": fb}


def joint_entropy(cfg: RunConfig, train: FeatureDataset, test: FeatureDataset) -> float:
    """Response entropy of one model trained centrally on all training data."""
    init = ClientParams.init(cfg.num_classes, train.dim, cfg.adapter)
    p = local_train(
        init, train, cfg.local_epochs, cfg.local_batch, local_optimizer(cfg),
        client_stream(cfg.seed, 0, 0, cfg.num_clients), masked=False,
    )  # fmt: skip
    return mean_entropy(p, test, None)


def run_bias_study(cfg: RunConfig, betas) -> dict:
    """Client response entropy after local training, and final federated accuracy, per beta.

    The study treats all classes as a single task.
    """
    betas = [float(b) for b in betas]
    if not betas:
        raise ConfigError("need at least one beta")
    base = cfg.replace(num_tasks=1)
    train, test = load_data(base)
    points = []
    for beta in betas:
        c = base.replace(beta=beta)
        lb = local_bias(c, train, test, beta)
        rep = run(c, (train, test))
        points.append(
            {"beta": beta, "entropy": lb["entropy"], "feature_bias": lb["feature_bias"], "accuracy": rep.faa}
        )
    return {
        "config": base.echo(),
        "seed": base.seed,
        "entropy_unit": "nats",
        "joint_entropy": joint_entropy(base, train, test),
        "points": points,
    }


ABLATION_ROWS = {
    "no_cr": {"rebalance": False},
    "cr_old": {"rebalance": True, "class_filter": "old_only"},
    "cr_cur": {"rebalance": True, "class_filter": "current_only"},
    "cr_both": {"rebalance": True, "class_filter": "all"},
}


def run_ablation(cfg: RunConfig) -> dict:
    """Same seed, four rebalancing variants: none, old classes, current classes, all classes."""
    cfg.validate()
    data = load_data(cfg)
    rows = {}
    for name, overrides in ABLATION_ROWS.items():
        rep = run(cfg.replace(**overrides), data)
        rows[name] = {"faa": rep.faa, "first_digest": rep.rounds[0]["params_digest_pre"]}
    return {"config": cfg.echo(), "seed": cfg.seed, "rows": rows}


# --------------------------------------------------------------------------- #
# Output
# --------------------------------------------------------------------------- #


def write_bias_csv(study: dict, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["beta", "entropy_nats", "accuracy", "feature_bias"])
        for p in study["points"]:
            w.writerow([p["beta"], p["entropy"], p["accuracy"], p["feature_bias"]])


def write_faa_csv(ablation: dict, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "faa"])
        for name, row in ablation["rows"].items():
            w.writerow([name, row["faa"]])
