import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acformer.data import (DataError, SeriesDataset, chronological_split, load_csv, parse_ratio, standardize,
                           window_batches, window_count, window_starts)


def write_csv(path, n, c=2, seed=0):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=(n, c)) * 3 + 1
    lines = ["date," + ",".join(f"v{i}" for i in range(c))]
    lines += [f"t{i}," + ",".join(repr(float(v)) for v in row) for i, row in enumerate(vals)]
    path.write_text("\n".join(lines) + "\n")
    return vals


def make_ds(n, c=2, seed=0):
    vals = np.random.default_rng(seed).normal(size=(n, c))
    return SeriesDataset("x", vals, tuple(f"v{i}" for i in range(c)))


def test_load_csv(tmp_path):
    vals = write_csv(tmp_path / "a.csv", 20, 3)
    ds = load_csv(tmp_path / "a.csv")
    assert ds.columns == ("v0", "v1", "v2")
    assert ds.timestamps[0] == "t0"
    assert np.array_equal(ds.values, vals)


def test_load_csv_reports_bad_cell(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("date,a,b\nt0,1,2\nt1,3,oops\n")
    with pytest.raises(DataError, match=r"row 3, column 3"):
        load_csv(p)


def test_load_csv_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "nope.csv")


def test_load_csv_ragged_and_empty(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("date,a,b\nt0,1\n")
    with pytest.raises(DataError):
        load_csv(p)
    p.write_text("")
    with pytest.raises(DataError):
        load_csv(p)


def test_head():
    ds = make_ds(50)
    assert ds.head(20).n_steps == 20
    assert ds.head(0) is ds
    assert ds.head(500) is ds


def test_etth_split_counts():
    # 6:2:2 over 14400 hourly rows gives the conventional 12/4/4-month borders
    split = chronological_split(make_ds(14400), (6, 2, 2), 96, 96)
    assert (split.train_end, split.val_end) == (8640, 11520)
    counts = {k: window_count(hi - lo, 96, 96) for k, (lo, hi) in split.ranges.items()}
    assert counts == {"train": 8449, "val": 2785, "test": 2785}


def test_split_uses_train_statistics_only():
    ds = make_ds(300)
    ds.values[200:] += 100.0
    split = chronological_split(ds, (0.6, 0.2, 0.2), 10, 5)
    assert np.allclose(split.mean, ds.values[:180].mean(axis=0))
    z = standardize(ds, split).values
    assert np.allclose(z[:180].mean(axis=0), 0, atol=1e-12)
    assert np.allclose(z[:180].std(axis=0), 1)


def test_constant_channel_std_is_one():
    ds = make_ds(100)
    ds.values[:, 1] = 4.0
    split = chronological_split(ds, (0.6, 0.2, 0.2), 10, 5)
    assert split.std[1] == 1.0


def test_split_too_short():
    with pytest.raises(DataError):
        chronological_split(make_ds(100), (0.6, 0.2, 0.2), 96, 96)


def test_parse_ratio():
    assert parse_ratio("7:1:2") == (7.0, 1.0, 2.0)
    with pytest.raises(DataError):
        parse_ratio("1:1")


@settings(max_examples=200, deadline=None)
@given(n=st.integers(60, 600), S=st.integers(2, 20), P=st.integers(1, 20))
def test_split_segments_disjoint_labels(n, S, P):
    ds = make_ds(n)
    try:
        split = chronological_split(ds, (0.6, 0.2, 0.2), S, P)
    except DataError:
        return
    r = split.ranges
    assert r["train"][1] == split.train_end
    # label regions (after the S-step context) never overlap across segments
    assert r["val"][0] + S == split.train_end
    assert r["test"][0] + S == split.val_end
    assert r["test"][1] == n


@settings(max_examples=100, deadline=None)
@given(length=st.integers(1, 80), S=st.integers(1, 10), P=st.integers(1, 10), bs=st.integers(1, 9),
       shuffle=st.booleans())
def test_window_batches_cover_every_window(length, S, P, bs, shuffle):
    seg = np.arange(length, dtype=float)[:, None] * np.ones(2)
    if length < S + P:
        with pytest.raises(DataError):
            next(window_batches(seg, S, P, bs))
        return
    seen = []
    for X, Y in window_batches(seg, S, P, bs, shuffle=shuffle, seed=1, epoch=2):
        assert X.shape[1:] == (S, 2) and Y.shape[1:] == (P, 2) and len(X) <= bs
        assert np.all(Y[:, 0, 0] == X[:, -1, 0] + 1)
        seen.extend(X[:, 0, 0].astype(int).tolist())
    assert sorted(seen) == list(range(window_count(length, S, P)))


def test_shuffle_is_seeded_per_epoch():
    a = window_starts(100, 5, 5, True, seed=3, epoch=1)
    assert np.array_equal(a, window_starts(100, 5, 5, True, seed=3, epoch=1))
    assert not np.array_equal(a, window_starts(100, 5, 5, True, seed=3, epoch=2))
    assert np.array_equal(window_starts(30, 5, 5), np.arange(21))
