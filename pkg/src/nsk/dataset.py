"""CSV datasets and batch iteration for the training runtime.

Labels come from one named column ("class as a number"); all other columns
become features, in header order. Shuffling draws a fresh seeded permutation
each epoch, the final partial batch is delivered, and with more than one
worker batches flow through the prefetch pipeline.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from nsk.autodiff import make_data
from nsk.concurrency import END_OF_DATA, EndOfData, prefetch_next, prefetch_start
from nsk.errors import DataLoadError
from nsk.tensor import Pool, Tensor


@dataclass
class DatasetHandle:
    features: np.ndarray  # [m, k] float32
    labels: np.ndarray  # [m] float32, integer-valued
    batch_size: int
    shuffle: bool = False
    seed: int = 0
    epoch: int = 0
    cursor: int = 0
    permutation: np.ndarray | None = None
    _queue: object = None
    _rng: np.random.Generator = field(default=None, repr=False)

    @property
    def num_rows(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def num_batches(self) -> int:
        m = self.num_rows
        return (m + self.batch_size - 1) // self.batch_size


def load_csv(path: str, label_column: str) -> DatasetHandle:
    """Load a numeric CSV with a header row; one column holds class labels."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataLoadError(f"cannot open {path}: {exc.strerror or exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataLoadError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DataLoadError(f"unknown label column {label_column!r} (header: {', '.join(header)})")
        label_idx = header.index(label_column)
        features: list[list[float]] = []
        labels: list[float] = []
        for rownum, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise DataLoadError(f"{path} row {rownum}: expected {len(header)} fields, got {len(row)}")
            feat_row = []
            for colnum, cell in enumerate(row):
                try:
                    value = float(cell)
                except ValueError:
                    raise DataLoadError(
                        f"{path} row {rownum}, column {header[colnum]!r}: non-numeric value {cell.strip()!r}"
                    ) from None
                if colnum == label_idx:
                    labels.append(value)
                else:
                    feat_row.append(value)
            features.append(feat_row)
    if not features:
        raise DataLoadError(f"{path} has no data rows")
    return DatasetHandle(
        features=np.asarray(features, dtype=np.float32),
        labels=np.asarray(labels, dtype=np.float32),
        batch_size=len(features),
    )


def reset_epoch(ds: DatasetHandle, workers: int = 1, capacity: int | None = None) -> None:
    """Start a new epoch: fresh permutation, cursor at 0, prefetch if W > 1."""
    if ds._rng is None:
        ds._rng = np.random.default_rng(ds.seed)
    ds.epoch += 1
    ds.cursor = 0
    if ds.shuffle:
        ds.permutation = ds._rng.permutation(ds.num_rows)
    else:
        ds.permutation = np.arange(ds.num_rows)
    if workers > 1:
        ds._queue = prefetch_start(
            lambda i: batch_rows(ds, i),
            workers=workers,
            capacity=capacity or 2 * workers,
            n_batches=ds.num_batches(),
        )
    else:
        ds._queue = None


def batch_rows(ds: DatasetHandle, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows of batch ``index`` under the current epoch permutation."""
    if ds.permutation is None:
        reset_epoch(ds)
    lo = index * ds.batch_size
    hi = min(lo + ds.batch_size, ds.num_rows)
    rows = ds.permutation[lo:hi]
    return ds.features[rows], ds.labels[rows]


def next_batch(ds: DatasetHandle, pool: Pool) -> tuple[Tensor, Tensor] | EndOfData:
    """Next (features, labels) as no-grad data tensors; END_OF_DATA when done.

    The epoch starts lazily on first call; after END_OF_DATA the next call
    begins a new epoch only via reset_epoch.
    """
    if ds.permutation is None:
        reset_epoch(ds)
    if ds._queue is not None:
        item = prefetch_next(ds._queue)
        if item is END_OF_DATA:
            return END_OF_DATA
        feats, labs = item
    else:
        if ds.cursor >= ds.num_batches():
            return END_OF_DATA
        feats, labs = batch_rows(ds, ds.cursor)
        ds.cursor += 1
    return make_data(pool, feats), make_data(pool, labs)
