"""Tests for dlsim data"""

import sys, os
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

import tempfile
from itertools import combinations
from pathlib import Path

import numpy as np
import pytest

from dlsim.data import Dataset, load_csv, make_blobs, partition_uniform, sample_batch, sample_nonmembers
from dlsim.errors import DataFormatError
from dlsim.models import ModelSpec, accuracy, sgd_step
from dlsim.numkit import ParamVec, Rng


def _write(text: str) -> Path:
    handle = tempfile.NamedTemporaryFile("w", suffix=".csv", delete=False, encoding="utf-8")
    handle.write(text)
    handle.close()
    return Path(handle.name)


def _rows(n: int) -> Dataset:
    return Dataset(np.arange(n, dtype=float).reshape(-1, 1), np.arange(n) % 2)


def test_blobs_one_per_class():
    ds = make_blobs(Rng(1), 10, 3, 10, spread=1.0)
    assert sorted(ds.labels.tolist()) == list(range(10))


def test_blobs_balanced_and_deterministic():
    a = make_blobs(Rng(2), 101, 4, 3, spread=0.5)
    b = make_blobs(Rng(2), 101, 4, 3, spread=0.5)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)
    counts = np.bincount(a.labels)
    assert counts.max() - counts.min() <= 1


def test_blobs_tight_clusters_are_learnable():
    ds = make_blobs(Rng(3), 40, 2, 2, spread=1e-3)
    spec = ModelSpec(kind="linear-softmax", input_dim=2, num_classes=2)
    params = sgd_step(spec, ParamVec.zeros(spec.param_count), ds.batch(range(len(ds))), lr=0.5, steps=200)
    assert accuracy(spec, params, ds.inputs, ds.labels) == 1.0


def test_blobs_invalid_args():
    with pytest.raises(DataFormatError):
        make_blobs(Rng(0), 3, 2, 5, spread=1.0)
    with pytest.raises(DataFormatError):
        make_blobs(Rng(0), 30, 2, 2, spread=0.0)


def test_load_csv_basic():
    ds = load_csv(_write("1.0,2.0,0\n3.0,4.0,1\n"))
    assert len(ds) == 2 and ds.input_dim == 2 and ds.num_classes == 2


def test_load_csv_remaps_labels():
    ds = load_csv(_write("1,5\r\n2,5\r\n3,9\r\n"))
    assert ds.labels.tolist() == [0, 0, 1]


def test_load_csv_ragged_row_names_line():
    with pytest.raises(DataFormatError) as info:
        load_csv(_write("1,2,3,0\n1,2,1\n"))
    assert info.value.line == 2
    assert "line 2" in str(info.value)


def test_load_csv_rejects_bad_input():
    with pytest.raises(DataFormatError):
        load_csv(_write(""))
    with pytest.raises(DataFormatError):
        load_csv(_write("1,x,0\n2,3,1\n"))


def test_partition_holdout_arithmetic():
    part = partition_uniform(Rng(0), _rows(100), 4, 0.2)
    assert len(part.holdout) == 20
    assert [len(s) for s in part.shards] == [20, 20, 20, 20]


def test_partition_leftover_goes_to_holdout():
    part = partition_uniform(Rng(0), _rows(101), 4, 0.0)
    assert [len(s) for s in part.shards] == [25] * 4
    assert len(part.holdout) == 1


def test_partition_disjoint():
    for seed in range(5):
        part = partition_uniform(Rng(seed), _rows(97), 6, 0.1)
        for a, b in combinations(part.shards, 2):
            assert not set(a) & set(b)
        everything = [r for s in part.shards for r in s] + list(part.holdout)
        assert len(everything) == len(set(everything)) == 97


def test_partition_deterministic_digest():
    a = partition_uniform(Rng(4), _rows(50), 5, 0.2)
    b = partition_uniform(Rng(4), _rows(50), 5, 0.2)
    assert a.digest() == b.digest()
    assert a.digest() != partition_uniform(Rng(5), _rows(50), 5, 0.2).digest()


def test_partition_too_few_rows():
    with pytest.raises(DataFormatError):
        partition_uniform(Rng(0), _rows(4), 8, 0.0)
    with pytest.raises(DataFormatError):
        partition_uniform(Rng(0), _rows(10), 2, 1.0)


def test_sample_batch():
    gen = np.random.default_rng(0)
    rows = [3, 8, 9, 12, 20]
    picked = sample_batch(rows, 3, gen)
    assert len(set(picked.tolist())) == 3 and set(picked.tolist()) <= set(rows)
    assert sample_batch(rows, 10, gen).tolist() == rows


def test_sample_nonmembers_from_holdout():
    part = partition_uniform(Rng(0), _rows(100), 4, 0.2)
    picked = sample_nonmembers(part, 10, np.random.default_rng(1))
    assert set(picked.tolist()) <= set(part.holdout)
    with pytest.raises(DataFormatError):
        sample_nonmembers(part, 21, np.random.default_rng(1))


if __name__ == "__main__":
    for name_key, fn in list(globals().items()):
        if name_key.startswith("test_") and callable(fn):
            try:
                fn()
                print(f"  PASS  {name_key}")
            except Exception as e:
                print(f"  FAIL  {name_key}: {e}")
