import os

import numpy as np
import pytest

from nsk.concurrency import END_OF_DATA
from nsk.dataset import DatasetHandle, batch_rows, load_csv, next_batch, reset_epoch
from nsk.errors import DataLoadError
from nsk.tensor import Pool


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_load_xor_file(examples_dir):
    ds = load_csv(os.path.join(examples_dir, "xor.csv"), "label")
    assert ds.features.shape == (4, 2)
    assert ds.labels.shape == (4,)
    np.testing.assert_array_equal(ds.labels, [0, 1, 1, 0])


def test_label_column_can_be_anywhere(tmp_path):
    path = write(tmp_path, "mid.csv", "a,label,b\n1,9,2\n3,8,4\n")
    ds = load_csv(path, "label")
    np.testing.assert_array_equal(ds.features, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(ds.labels, [9, 8])


def test_unknown_label_column(tmp_path):
    path = write(tmp_path, "x.csv", "a,b\n1,2\n")
    with pytest.raises(DataLoadError) as err:
        load_csv(path, "label")
    assert "label" in str(err.value)


def test_non_numeric_cell_reports_row_and_column(tmp_path):
    path = write(tmp_path, "bad.csv", "a,b,label\n1,2,0\n1,oops,1\n")
    with pytest.raises(DataLoadError) as err:
        load_csv(path, "label")
    assert "row 3" in str(err.value) and "'b'" in str(err.value)


def test_empty_file_rejected(tmp_path):
    path = write(tmp_path, "empty.csv", "")
    with pytest.raises(DataLoadError):
        load_csv(path, "label")


def test_missing_file_rejected(tmp_path):
    with pytest.raises(DataLoadError):
        load_csv(str(tmp_path / "nope.csv"), "label")


def test_moons_file_shape(examples_dir):
    ds = load_csv(os.path.join(examples_dir, "moons.csv"), "label")
    assert ds.features.shape == (1000, 2)
    assert set(np.unique(ds.labels)) == {0.0, 1.0}


def test_moons_file_matches_generator(examples_dir):
    # the committed CSV is reproducible from the committed sampler
    from gen_moons import make_moons

    x, y = make_moons(1000, noise=0.12, seed=0)
    ds = load_csv(os.path.join(examples_dir, "moons.csv"), "label")
    np.testing.assert_allclose(ds.features, x, atol=5e-7)  # CSV keeps 6 decimals
    np.testing.assert_array_equal(ds.labels, y)


def make_ds(m=10, batch=4, shuffle=False, seed=0):
    rng = np.random.default_rng(1)
    return DatasetHandle(
        features=np.arange(m * 2, dtype=np.float32).reshape(m, 2),
        labels=np.arange(m, dtype=np.float32),
        batch_size=batch,
        shuffle=shuffle,
        seed=seed,
    )


def test_batch_sizes_with_partial_final():
    ds = make_ds(m=10, batch=4)
    pool = Pool()
    sizes = []
    while True:
        item = next_batch(ds, pool)
        if item is END_OF_DATA:
            break
        feats, labs = item
        assert feats.shape[0] == labs.shape[0]
        sizes.append(feats.shape[0])
    assert sizes == [4, 4, 2]


def test_batches_in_file_order_without_shuffle():
    ds = make_ds(m=6, batch=3)
    pool = Pool()
    feats, labs = next_batch(ds, pool)
    np.testing.assert_array_equal(labs.data, [0, 1, 2])


def test_shuffle_same_seed_same_permutation():
    a, b = make_ds(shuffle=True, seed=9), make_ds(shuffle=True, seed=9)
    reset_epoch(a)
    reset_epoch(b)
    np.testing.assert_array_equal(a.permutation, b.permutation)
    assert not np.array_equal(a.permutation, np.arange(10))


def test_shuffle_draws_new_permutation_each_epoch():
    ds = make_ds(shuffle=True, seed=3)
    reset_epoch(ds)
    first = ds.permutation.copy()
    reset_epoch(ds)
    assert not np.array_equal(first, ds.permutation)


@pytest.mark.parametrize("batch", [1, 3, 4, 10])
@pytest.mark.parametrize("workers", [1, 3])
def test_epoch_coverage_exact(batch, workers):
    # every row delivered exactly once per epoch, any batch size and W
    ds = make_ds(m=10, batch=batch, shuffle=True, seed=5)
    pool = Pool()
    reset_epoch(ds, workers=workers)
    seen = []
    while True:
        item = next_batch(ds, pool)
        if item is END_OF_DATA:
            break
        _feats, labs = item
        seen.extend(labs.data.tolist())
    assert sorted(seen) == list(range(10))


def test_batch_rows_applies_permutation():
    ds = make_ds(m=4, batch=2, shuffle=True, seed=2)
    reset_epoch(ds)
    feats, labs = batch_rows(ds, 0)
    np.testing.assert_array_equal(labs, ds.labels[ds.permutation[:2]])
