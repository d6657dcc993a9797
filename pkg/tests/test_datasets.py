import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcil_sim.client import ClientParams, accuracy, local_train
from fcil_sim.datasets import (
    FeatureDataset,
    PartitionSpec,
    SyntheticSpec,
    dirichlet_indices,
    dirichlet_partition,
    label_entropy,
    read_features,
    schedule_tasks,
    synth_generate,
    write_features,
)
from fcil_sim.errors import FormatError, InputError, PartitionInfeasible
from fcil_sim.numerics import AdamState, RngStream


def test_synth_separable_two_class():
    ds = synth_generate(SyntheticSpec(2, 2, mean_scale=10, cov_scale=1, samples_per_class=1000, seed=0))
    p = local_train(ClientParams.init(2, 2), ds, 5, 16, AdamState(0.01), RngStream(0, (1,)), masked=False)
    assert accuracy(p, ds) >= 0.99


def test_synth_empty_and_deterministic():
    empty = synth_generate(SyntheticSpec(3, 4, samples_per_class=0))
    assert empty.is_empty and empty.dim == 4
    spec = SyntheticSpec(4, 5, samples_per_class=20, seed=11)
    a, b = synth_generate(spec), synth_generate(spec)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_synth_test_split_is_fresh_draw_same_means():
    spec = SyntheticSpec(3, 8, mean_scale=5, samples_per_class=2000, test_per_class=2000, seed=2)
    tr, te = synth_generate(spec), synth_generate(spec, "test")
    assert not np.array_equal(tr.features, te.features)
    for c in range(3):
        diff = tr.features[tr.labels == c].mean(0) - te.features[te.labels == c].mean(0)
        assert np.abs(diff).max() < 5 * math.sqrt(2 / 2000)


def test_synth_invalid():
    with pytest.raises(InputError):
        synth_generate(SyntheticSpec(1, 4))
    with pytest.raises(InputError):
        synth_generate(SyntheticSpec(3, 0))


# -- schedule ------------------------------------------------------------------


def test_schedule_exact_division():
    s = schedule_tasks(10, 5, seed=0)
    assert [len(t) for t in s.tasks] == [2] * 5
    assert sorted(c for t in s.tasks for c in t) == list(range(10))


def test_schedule_single_task():
    assert schedule_tasks(10, 1, seed=3).tasks == [list(range(10))]


def test_schedule_remainder_rule():
    s = schedule_tasks(196, 10, seed=1)
    assert [len(t) for t in s.tasks] == [20] * 6 + [19] * 4
    assert sorted(c for t in s.tasks for c in t) == list(range(196))


def test_schedule_too_many_tasks():
    with pytest.raises(InputError):
        schedule_tasks(3, 4, 0)


# -- partition -----------------------------------------------------------------


def _labels(n_classes, per_class):
    return np.repeat(np.arange(n_classes), per_class)


def test_partition_homogeneous_limit():
    labels = _labels(2, 10_000)
    shards = dirichlet_indices(labels, [0, 1], PartitionSpec(10, 1e6, seed=0))
    for idx in shards:
        n = idx.size
        share = (labels[idx] == 0).mean()
        # multinomial 3-sigma band on the client's label mix, plus Dirichlet jitter (~1e-3 at beta=1e6)
        assert abs(share - 0.5) <= 3 * math.sqrt(0.25 / n) + 0.002
        # each client's slice of every class is within 2 points of 1/M
        for c in (0, 1):
            assert abs((labels[idx] == c).sum() / 10_000 - 0.1) < 0.02


def test_partition_single_client_is_whole_task():
    ds = synth_generate(SyntheticSpec(4, 3, samples_per_class=7, seed=1))
    (shard,) = dirichlet_partition(ds, [1, 2], PartitionSpec(1, 0.1))
    ref = ds.restrict([1, 2])
    assert np.array_equal(shard.features, ref.features)
    assert np.array_equal(shard.labels, ref.labels)


def _mean_client_entropy(beta, seed, n_classes=100, per_class=50, m=10):
    labels = _labels(n_classes, per_class)
    shards = dirichlet_indices(labels, range(n_classes), PartitionSpec(m, beta, seed))
    return np.mean([label_entropy(labels[s], n_classes) for s in shards])


def test_partition_low_beta_less_diverse():
    wins = sum(_mean_client_entropy(0.05, s) < _mean_client_entropy(0.5, s) for s in range(5))
    assert wins == 5


def test_partition_entropy_non_increasing_over_betas():
    ok = 0
    for seed in range(20):
        e = [_mean_client_entropy(b, seed, n_classes=20, per_class=100) for b in (0.5, 0.1, 0.05)]
        ok += e[0] >= e[1] >= e[2]
    assert ok > 10


@settings(max_examples=30)
@given(
    st.integers(1, 8),
    st.floats(0.05, 10.0),
    st.integers(0, 10_000),
    st.lists(st.integers(1, 40), min_size=1, max_size=6),
)
def test_partition_disjoint_and_exhaustive(m, beta, seed, per_class):
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(per_class)])
    classes = list(range(len(per_class)))
    spec = PartitionSpec(m, beta, seed, min_samples_per_client=0)
    shards = dirichlet_indices(labels, classes, spec, task_index=3)
    allidx = np.concatenate(shards)
    assert allidx.size == labels.size
    assert np.array_equal(np.sort(allidx), np.arange(labels.size))
    again = dirichlet_indices(labels, classes, spec, task_index=3)
    assert all(np.array_equal(a, b) for a, b in zip(shards, again))


def test_partition_client_share_unbiased():
    """Mean share per client over many draws is 1/M within 3 sigma."""
    m, draws = 5, 200
    labels = _labels(3, 200)
    shares = np.zeros((draws, m))
    for s in range(draws):
        shards = dirichlet_indices(labels, [0, 1, 2], PartitionSpec(m, 0.5, s, 0))
        shares[s] = [x.size / labels.size for x in shards]
    mean = shares.mean(axis=0)
    se = shares.std(axis=0, ddof=1) / math.sqrt(draws)
    assert np.all(np.abs(mean - 1 / m) <= 3 * se)


def test_partition_infeasible():
    labels = _labels(2, 5)
    with pytest.raises(PartitionInfeasible):
        dirichlet_indices(labels, [0, 1], PartitionSpec(10, 0.01, 0, min_samples_per_client=1, max_retries=5))


def test_partition_missing_class():
    with pytest.raises(InputError):
        dirichlet_indices(_labels(2, 5), [0, 5], PartitionSpec(2, 1.0))


# -- feature files -------------------------------------------------------------


def _small():
    x = np.array([[0.5, -1.25], [3.0, 4.0], [1e-3, 7.5]], dtype=np.float32).astype(np.float64)
    return FeatureDataset(x, np.array([0, 2, 1]), 3)


def test_feature_file_roundtrip(tmp_path):
    p1, p2 = tmp_path / "a.fcf", tmp_path / "b.fcf"
    ds = _small()
    write_features(ds, p1)
    back = read_features(p1)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.labels, ds.labels)
    assert back.num_classes == 3
    write_features(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_feature_file_layout(tmp_path):
    p = tmp_path / "a.fcf"
    write_features(_small(), p)
    raw = p.read_bytes()
    assert raw[:4] == b"FCF1"
    assert int.from_bytes(raw[4:6], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 2
    assert int.from_bytes(raw[12:16], "little") == 3
    assert int.from_bytes(raw[16:24], "little") == 3
    assert len(raw) == 24 + 3 * (2 * 4 + 2)


def test_feature_file_bad_magic(tmp_path):
    p = tmp_path / "a.fcf"
    write_features(_small(), p)
    raw = bytearray(p.read_bytes())
    raw[0:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="FCF1") as e:
        read_features(p)
    assert e.value.offset == 0


def test_feature_file_truncated(tmp_path):
    p = tmp_path / "a.fcf"
    write_features(_small(), p)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(FormatError) as e:
        read_features(p)
    assert e.value.offset == 24 + 2 * 10


def test_feature_file_label_out_of_range(tmp_path):
    p = tmp_path / "a.fcf"
    write_features(_small(), p)
    raw = bytearray(p.read_bytes())
    raw[24 + 8 : 24 + 10] = (7).to_bytes(2, "little")
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="label 7"):
        read_features(p)


def test_feature_file_empty_dataset(tmp_path):
    p = tmp_path / "empty.fcf"
    write_features(FeatureDataset(np.zeros((0, 768)), np.zeros(0, dtype=np.int64), 100), p)
    ds = read_features(p)
    assert ds.is_empty and ds.dim == 768 and ds.num_classes == 100
