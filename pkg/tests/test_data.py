import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from autofusion.data import (DataError, IdxCountMismatchError, IdxMagicError, IdxTruncatedError,
                             InsufficientDataError, InvalidSplitError, LabeledDataset, batches,
                             carve_validation, concat, draw_pool, load_idx, split_by_class, write_idx)
from conftest import MNIST_DIR, needs_mnist


def toy(n=50, classes=10, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledDataset(rng.uniform(size=(n, 4, 4)), np.arange(n) % classes, classes, "toy")


def write_pair(tmp_path, images, labels):
    ip, lp = tmp_path / "img", tmp_path / "lab"
    write_idx(ip, lp, images, labels)
    return ip, lp


# --- IDX parsing ---------------------------------------------------------------

def test_idx_round_trip(tmp_path):
    images = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3) * 14
    ip, lp = write_pair(tmp_path, images, [3, 7])
    ds = load_idx(ip, lp)
    assert ds.images.shape == (2, 3, 3) and list(ds.labels) == [3, 7]
    assert np.allclose(ds.images * 255, images)
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_idx_gzip(tmp_path):
    ip, lp = write_pair(tmp_path, np.full((1, 2, 2), 255, np.uint8), [1])
    for p in (ip, lp):
        with open(p, "rb") as src, gzip.open(str(p) + ".gz", "wb") as dst:
            dst.write(src.read())
    ds = load_idx(str(ip) + ".gz", str(lp) + ".gz")
    assert ds.images.max() == 1.0


def test_idx_empty(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((0, 28, 28), np.uint8), [])
    ds = load_idx(ip, lp)
    assert len(ds) == 0 and ds.images.shape == (0, 28, 28)


def test_idx_count_mismatch(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((3, 2, 2), np.uint8), [0, 1, 2])
    write_idx(tmp_path / "x", tmp_path / "lab2", np.zeros((2, 2, 2), np.uint8), [0, 1])
    with pytest.raises(IdxCountMismatchError):
        load_idx(ip, tmp_path / "lab2")


def test_idx_bad_magic(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((1, 2, 2), np.uint8), [0])
    with pytest.raises(IdxMagicError):
        load_idx(lp, lp)
    raw = bytearray(ip.read_bytes())
    raw[3] = 0x99
    ip.write_bytes(bytes(raw))
    with pytest.raises(IdxMagicError):
        load_idx(ip, lp)


def test_idx_truncated(tmp_path):
    ip, lp = write_pair(tmp_path, np.zeros((4, 5, 5), np.uint8), [0, 1, 2, 3])
    ip.write_bytes(ip.read_bytes()[:-3])
    with pytest.raises(IdxTruncatedError):
        load_idx(ip, lp)
    lp.write_bytes(struct.pack(">I", 0x801))
    with pytest.raises(IdxTruncatedError):
        load_idx(tmp_path / "img", lp)


def test_dataset_invariants():
    with pytest.raises(DataError):
        LabeledDataset(np.zeros((2, 2, 2)), [0, 5], 3)
    with pytest.raises(DataError):
        LabeledDataset(np.zeros((2, 2, 2)), [0], 3)


@needs_mnist
def test_mnist_train_file():
    ds = load_idx(MNIST_DIR / "train-images-idx3-ubyte", MNIST_DIR / "train-labels-idx1-ubyte")
    assert len(ds) == 60000 and ds.images.shape[1:] == (28, 28) and ds.class_count == 10


# --- splits ------------------------------------------------------------------------

def test_split_five_five():
    ds = toy(100)
    sp = split_by_class(ds, [0, 1, 2, 3, 4], seed=0)
    assert len(sp.task_a) + len(sp.task_b) == len(ds)
    assert sp.classes_a == [0, 1, 2, 3, 4] and sp.classes_b == [5, 6, 7, 8, 9]
    assert sp.task_a.class_count == 5 and set(sp.task_b.labels) == set(range(5))


def test_split_relabels_ascending():
    sp = split_by_class(toy(30), [7, 2, 9], seed=0)
    assert sp.class_map_a == {2: 0, 7: 1, 9: 2}


def test_split_invalid():
    with pytest.raises(InvalidSplitError):
        split_by_class(toy(), list(range(10)), 0)
    with pytest.raises(InvalidSplitError):
        split_by_class(toy(), [], 0)
    with pytest.raises(InvalidSplitError):
        split_by_class(toy(), [11], 0)


def test_split_random_half_deterministic():
    a = split_by_class(toy(), None, seed=3)
    b = split_by_class(toy(), None, seed=3)
    assert a.classes_a == b.classes_a and len(a.classes_a) == 5
    assert np.array_equal(a.task_a.images, b.task_a.images)


@given(st.sets(st.integers(0, 9), min_size=1, max_size=9), st.integers(0, 1000))
def test_split_properties(classes_a, seed):
    ds = toy(60)
    sp = split_by_class(ds, sorted(classes_a), seed)
    assert not set(sp.classes_a) & set(sp.classes_b)
    assert set(sp.classes_a) | set(sp.classes_b) == set(range(10))
    # round trip back to original labels
    for which in ("a", "b"):
        g = sp.to_global(which)
        orig = ds.labels[np.isin(ds.labels, sp.classes_a if which == "a" else sp.classes_b)]
        assert np.array_equal(g.labels, orig)
    assert len(sp.joint()) == len(ds)


# --- pools, batches ---------------------------------------------------------------

def test_pool_size_and_determinism():
    ds = toy(500)
    p = draw_pool(ds, 200, seed=1)
    assert len(p) == 200 and len(set(p.indices.tolist())) == 200
    assert np.array_equal(p.images, draw_pool(ds, 200, seed=1).images)
    assert not np.array_equal(p.indices, draw_pool(ds, 200, seed=2).indices)


def test_pool_edge_cases():
    assert len(draw_pool(toy(10), 0, 0)) == 0
    with pytest.raises(InsufficientDataError):
        draw_pool(toy(10), 11, 0)


def test_batches_sizes():
    sizes = [len(y) for _, y in batches(toy(10), 4, shuffle=False)]
    assert sizes == [4, 4, 2]


def test_batches_unshuffled_order():
    ds = toy(10)
    ys = np.concatenate([y for _, y in batches(ds, 3, shuffle=False)])
    assert np.array_equal(ys, ds.labels)


@given(st.integers(1, 40), st.integers(1, 12), st.integers(0, 99))
def test_batches_cover_each_sample_once(n, bs, seed):
    ds = LabeledDataset(np.arange(n, dtype=float).reshape(n, 1, 1), np.zeros(n, int), 1)
    seen = np.concatenate([x.ravel() for x, _ in batches(ds, bs, seed=seed)])
    assert sorted(seen.tolist()) == list(range(n))
    again = np.concatenate([x.ravel() for x, _ in batches(ds, bs, seed=seed)])
    assert np.array_equal(seen, again)


def test_validation_carve_and_concat():
    tr, va = carve_validation(toy(100), 20, seed=0)
    assert len(tr) == 80 and len(va) == 20
    assert len(concat([tr, va])) == 100
    with pytest.raises(InsufficientDataError):
        carve_validation(toy(5), 6)
