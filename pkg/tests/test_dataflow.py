import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedtune.dataflow import Dataset, federate, lda_split, load_csv, split_tvt, synth_blobs
from fedtune.engine import ClientHypers, init_model, local_update, Architecture, _forward


def _write(tmp_path, text):
    p = tmp_path / "d.csv"
    p.write_text(text)
    return p


def test_load_csv_factorizes_in_order(tmp_path):
    ds = load_csv(_write(tmp_path, "x1,y,x2\n1,a,5\n2,b,5\n3,a,5\n"), "y")
    assert ds.labels.tolist() == [0, 1, 0]
    assert ds.n_classes == 2
    # constant column becomes zeros; the other is standardized
    assert np.all(ds.features[:, 1] == 0)
    assert np.isclose(ds.features[:, 0].mean(), 0) and np.isclose(ds.features[:, 0].std(), 1)


def test_load_csv_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "nope.csv", "y")
    with pytest.raises(ValueError, match="label column"):
        load_csv(_write(tmp_path, "a,b\n1,2\n"), "y")
    with pytest.raises(ValueError, match="non-numeric"):
        load_csv(_write(tmp_path, "a,y\nfoo,1\n2,0\n"), "y")
    with pytest.raises(ValueError, match="single class"):
        load_csv(_write(tmp_path, "a,y\n1,1\n2,1\n"), "y")


def test_synth_deterministic_and_balanced():
    a = synth_blobs(10, 3, 4, 0.5, seed=1)
    b = synth_blobs(10, 3, 4, 0.5, seed=1)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    assert sorted(np.bincount(a.labels, minlength=4).tolist(), reverse=True) == [3, 3, 2, 2]


def test_synth_tiny_spread_is_separable():
    ds = synth_blobs(200, 5, 3, 1e-3, seed=0)
    arch = Architecture(5, 3)
    m = init_model(arch, 0)
    m, _ = local_update(m, ds, ClientHypers(batch_size=200, learning_rate=1.0), steps=300)
    pred = _forward(m, ds.features)[0].argmax(1)
    assert np.mean(pred == ds.labels) == 1.0


def test_lda_single_client():
    ds = synth_blobs(50, 2, 3, 1.0, seed=0)
    parts = lda_split(ds, 1, 0.5, seed=0)
    assert parts[0].tolist() == list(range(50))


def test_lda_errors():
    ds = synth_blobs(5, 2, 2, 1.0, seed=0)
    with pytest.raises(ValueError):
        lda_split(ds, 6, 0.5)
    with pytest.raises(ValueError):
        lda_split(ds, 2, 0.0)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(10, 300), k=st.integers(1, 10), alpha=st.sampled_from([0.05, 0.5, 5.0]),
       seed=st.integers(0, 10_000))
def test_lda_partition_exact(n, k, alpha, seed):
    ds = synth_blobs(n, 2, 4, 1.0, seed=seed)
    parts = lda_split(ds, k, alpha, seed)
    allidx = np.concatenate(parts)
    assert sorted(allidx.tolist()) == list(range(n))
    assert all(len(p) >= 1 for p in parts)


def test_lda_large_alpha_is_near_iid():
    labels = np.repeat([0, 1], 1000)
    ds = Dataset(np.zeros((2000, 1)), labels, 2)
    for seed in range(20):
        for p in lda_split(ds, 2, 1000.0, seed):
            share = np.mean(labels[p] == 0)
            assert 0.45 <= share <= 0.55


def test_lda_large_alpha_total_variation():
    labels = np.repeat(np.arange(4), 500)
    ds = Dataset(np.zeros((2000, 1)), labels, 4)
    glob = np.full(4, 0.25)
    for seed in range(10):
        for p in lda_split(ds, 5, 1000.0, seed):
            dist = np.bincount(labels[p], minlength=4) / len(p)
            assert 0.5 * np.abs(dist - glob).sum() <= 0.1


def test_lda_small_alpha_is_skewed():
    labels = np.repeat(np.arange(4), 250)
    ds = Dataset(np.zeros((1000, 1)), labels, 4)
    hits = 0
    for seed in range(20):
        parts = lda_split(ds, 5, 0.1, seed)
        top = max(np.bincount(labels[p], minlength=4).max() / len(p) for p in parts)
        hits += top > 0.6
    assert hits > 10


def test_split_ratios():
    s = split_tvt(np.arange(10), seed=0)
    assert [len(s[k]) for k in ("train", "valid", "test")] == [8, 1, 1]
    s = split_tvt(np.arange(100), seed=0)
    assert [len(s[k]) for k in ("train", "valid", "test")] == [80, 10, 10]
    assert sorted(np.concatenate(list(s.values())).tolist()) == list(range(100))
    again = split_tvt(np.arange(100), seed=0)
    assert all(np.array_equal(s[k], again[k]) for k in s)
    with pytest.raises(ValueError):
        split_tvt(np.arange(2))


def test_federate_invariants(blobs_task):
    assert blobs_task.n_clients == 5
    total = sum(len(c.train) + len(c.valid) + len(c.test) for c in blobs_task.clients)
    assert total == 300
    assert all(len(c.train) > 0 for c in blobs_task.clients)
