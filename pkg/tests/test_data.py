import numpy as np
import pytest
from hypothesis import given, strategies as st

from vflpriv.data import (Dataset, column_kind, gen_adult_like, gen_credit_like, gen_purchase_like, load_csv,
                          make_batches, one_hot, partition_vertical, sample_poison, train_eval_split, write_csv)
from vflpriv.errors import DomainError, IngestionError


def test_purchase_like_shape_and_determinism():
    a = gen_purchase_like(300, d=40, classes=10, seed=3)
    b = gen_purchase_like(300, d=40, classes=10, seed=3)
    assert a.features.shape == (300, 40)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    assert set(np.unique(a.features)) <= {0.0, 1.0}
    assert set(a.labels) == set(range(10))  # every class appears at least once
    assert not np.array_equal(a.features, gen_purchase_like(300, d=40, classes=10, seed=4).features)


def test_purchase_like_flip_rate():
    ds = gen_purchase_like(4000, d=50, classes=4, seed=0, flip=0.1)
    # per-class column means sit near the prototype bit (0 or 1) up to the flip rate
    for c in range(4):
        m = ds.features[ds.labels == c].mean(axis=0)
        assert np.all(np.minimum(m, 1 - m) < 0.14)


def test_purchase_like_coarse_columns_shared():
    ds = gen_purchase_like(4000, d=20, classes=6, seed=0, flip=0.0, coarse_columns=8, coarse_group=2)
    proto = {c: ds.features[ds.labels == c][0] for c in range(6)}
    for c in range(0, 6, 2):
        assert np.array_equal(proto[c][:8], proto[c + 1][:8])
    with pytest.raises(DomainError):
        gen_purchase_like(100, d=20, classes=6, coarse_columns=20)


def test_purchase_like_needs_enough_rows():
    with pytest.raises(DomainError):
        gen_purchase_like(5, d=10, classes=10)


def test_credit_like_positive_rate():
    ds = gen_credit_like(20000, seed=1)
    assert int(ds.labels.sum()) == 34  # floor(20000 * 0.00172)
    assert np.allclose(ds.features.mean(axis=0), 0, atol=1e-10)
    with pytest.raises(DomainError):
        gen_credit_like(100, positive_rate=0.001)


def test_adult_like_schema():
    ds = gen_adult_like(500, seed=2)
    assert ds.schema[0] == "categorical:10"
    for j, kind in enumerate(ds.schema):
        k = column_kind(kind)[1]
        assert ds.features[:, j].min() >= 0 and ds.features[:, j].max() < k
    assert one_hot(ds).shape == (500, sum(int(s.split(":")[1]) for s in ds.schema))
    assert np.all(one_hot(ds).sum(axis=1) == len(ds.schema))


def test_dataset_validation():
    with pytest.raises(DomainError):
        Dataset(np.array([[0.5]]), np.array([0]), ("binary",), np.array([0]), 2)
    with pytest.raises(DomainError):
        Dataset(np.zeros((2, 1)), np.array([0, 0]), ("binary",), np.array([0, 0]), 2)
    with pytest.raises(DomainError):
        column_kind("ordinal")


def test_csv_round_trip(tmp_path):
    ds = gen_adult_like(50, seed=0)
    path = tmp_path / "adult.csv"
    write_csv(ds, path)
    back = load_csv(path, ds.schema, 2)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.labels, ds.labels)

    num = gen_credit_like(600, d=4, positive_rate=0.01, seed=0)
    write_csv(num, tmp_path / "num.csv")
    assert np.array_equal(load_csv(tmp_path / "num.csv", num.schema).features, num.features)


@pytest.mark.parametrize("body, needle", [
    ("a,b,label\n1,0\n", "row 2 has 2 columns"),
    ("a,b,label\n1,,0\n", "missing value"),
    ("a,b,label\n1,x,0\n", "cannot parse"),
    ("a,b,label\n2,0,0\n", "not binary"),
    ("a,label\n1,0\n", "header has 2 columns"),
    ("a,b,label\n1,0,y\n", "bad label"),
])
def test_csv_errors_name_row_and_column(tmp_path, body, needle):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(IngestionError, match=needle):
        load_csv(path, ["binary", "binary"])


def test_csv_missing_file(tmp_path):
    with pytest.raises(IngestionError):
        load_csv(tmp_path / "nope.csv", ["binary"])


def test_partition_vertical():
    ds = gen_purchase_like(200, d=10, classes=4, seed=0)
    p = partition_vertical(ds, [3, 7])
    assert [s.shape[1] for s in p.shards] == [3, 7]
    assert np.array_equal(p.concat(), ds.features)
    with pytest.raises(DomainError):
        partition_vertical(ds, [3, 6])
    with pytest.raises(DomainError):
        partition_vertical(ds, [0, 10])


@given(st.integers(1, 300), st.integers(1, 64), st.integers(0, 2**32))
def test_batches_cover_every_row_once(n, bs, seed):
    plan = make_batches(n, bs, seed=seed)
    rows = np.concatenate(plan.batches)
    assert np.array_equal(np.sort(rows), np.arange(n))
    assert all(len(b) == bs for b in plan.batches[:-1])
    assert len(plan) == -(-n // bs)
    assert all(np.array_equal(a, b) for a, b in zip(plan, make_batches(n, bs, seed=seed)))


def test_batches_without_shuffle():
    assert np.array_equal(np.concatenate(make_batches(7, 3, shuffle=False).batches), np.arange(7))
    with pytest.raises(DomainError):
        make_batches(5, 0)


@given(st.floats(0, 1), st.integers(0, 2**32))
def test_poison_sampling(alpha, seed):
    train = np.arange(10, 210)
    p = sample_poison(train, alpha, seed)
    assert len(p) == int(np.floor(alpha * 200 + 1e-9))
    assert np.isin(p.indices, train).all()
    assert len(np.unique(p.indices)) == len(p)
    assert np.array_equal(p.indices, sample_poison(train, alpha, seed).indices)


def test_poison_alpha_domain():
    with pytest.raises(DomainError):
        sample_poison(np.arange(5), 1.5)


def test_train_eval_split_disjoint():
    tr, ev = train_eval_split(101, seed=0)
    assert len(tr) == 81 and len(ev) == 20
    assert np.array_equal(np.sort(np.concatenate([tr, ev])), np.arange(101))
