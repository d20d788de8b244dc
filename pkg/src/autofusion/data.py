"""Dataset ingestion, class-disjoint task splits, batching and sample pools.

Images are always kept as ``(N, H, W)`` or ``(N, C, H, W)`` float arrays in
[0, 1]; flattening for MLPs happens in :mod:`autofusion.nn`.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


class IdxFormatError(DataError):
    """Base class for malformed IDX files."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class InvalidSplitError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(
                f"{self.name}: {len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"{self.name}: label outside [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def subset(self, index, name=None) -> "LabeledDataset":
        return LabeledDataset(self.images[index], self.labels[index], self.class_count,
                              name or self.name)


@dataclass
class TaskSplit:
    """Two class-disjoint tasks carved out of one labelled dataset.

    ``class_map_a`` maps an original class to its local (relabelled) index in
    ``task_a``; the inverse maps are available through :meth:`to_global`.
    """
    task_a: LabeledDataset
    task_b: LabeledDataset
    class_map_a: dict[int, int]
    class_map_b: dict[int, int]
    seed: int
    source_class_count: int = 10

    @property
    def classes_a(self) -> list[int]:
        return sorted(self.class_map_a)

    @property
    def classes_b(self) -> list[int]:
        return sorted(self.class_map_b)

    def inverse_map(self, which: str) -> dict[int, int]:
        cmap = self.class_map_a if which == "a" else self.class_map_b
        return {local: orig for orig, local in cmap.items()}

    def to_global(self, which: str) -> LabeledDataset:
        """Task data with labels mapped back to the original class indices."""
        ds = self.task_a if which == "a" else self.task_b
        inv = self.inverse_map(which)
        lut = np.array([inv[k] for k in range(len(inv))], dtype=np.int64)
        labels = lut[ds.labels] if len(ds) else ds.labels
        return LabeledDataset(ds.images, labels, self.source_class_count, ds.name)

    def joint(self) -> LabeledDataset:
        """Concatenation of both tasks in original labels (the undivided set)."""
        a, b = self.to_global("a"), self.to_global("b")
        return LabeledDataset(np.concatenate([a.images, b.images]),
                              np.concatenate([a.labels, b.labels]),
                              self.source_class_count, "joint")


@dataclass
class SamplePool:
    images: np.ndarray
    source_seed: int
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.images)


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, magic, ndim):
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(raw) < 4 + 4 * ndim:
        raise IdxTruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    payload = raw[4 + 4 * ndim:]
    expected = int(np.prod(dims, dtype=np.int64))
    if len(payload) < expected:
        raise IdxTruncatedError(f"{path}: payload has {len(payload)} bytes, header promises {expected}")
    return np.frombuffer(payload, dtype=np.uint8, count=expected).reshape(dims)


def load_idx(images_path, labels_path, class_count: int | None = None,
             name: str | None = None) -> LabeledDataset:
    """Read an IDX image/label file pair (optionally gzipped).

    Pixels are scaled to [0, 1] by dividing the raw bytes by 255.
    ``class_count`` defaults to ``max(label) + 1`` (10 for an empty file).
    """
    images = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise IdxCountMismatchError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels")
    if class_count is None:
        class_count = int(labels.max()) + 1 if len(labels) else 10
    return LabeledDataset(images.astype(np.float32) / 255.0, labels.astype(np.int64),
                          class_count, name or Path(images_path).name)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray):
    """Write uint8 images ``(N, H, W)`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, h, w))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def split_by_class(ds: LabeledDataset, classes_a: Sequence[int] | None, seed: int,
                   classes: Sequence[int] | None = None) -> TaskSplit:
    """Partition ``ds`` into two class-disjoint tasks.

    If ``classes_a`` is None, half of the classes are drawn at random from
    ``seed``. Local labels follow ascending original-class order. ``classes``
    defaults to ``range(ds.class_count)``.
    """
    universe = sorted(range(ds.class_count) if classes is None else set(classes))
    if classes_a is None:
        rng = np.random.default_rng(seed)
        classes_a = sorted(rng.choice(universe, size=len(universe) // 2, replace=False).tolist())
    set_a = {int(c) for c in classes_a}
    if not set_a:
        raise InvalidSplitError("classes_a is empty")
    unknown = set_a - set(universe)
    if unknown:
        raise InvalidSplitError(f"classes {sorted(unknown)} not in dataset")
    set_b = set(universe) - set_a
    if not set_b:
        raise InvalidSplitError("classes_a covers every class; task B would be empty")

    def make(cls_set, tag):
        cls = sorted(cls_set)
        cmap = {c: i for i, c in enumerate(cls)}
        mask = np.isin(ds.labels, cls)
        lut = np.full(ds.class_count, -1, dtype=np.int64)
        lut[cls] = np.arange(len(cls))
        sub = LabeledDataset(ds.images[mask], lut[ds.labels[mask]], len(cls), f"{ds.name}:{tag}")
        return sub, cmap

    task_a, map_a = make(set_a, "A")
    task_b, map_b = make(set_b, "B")
    return TaskSplit(task_a, task_b, map_a, map_b, seed, ds.class_count)


def draw_pool(ds: LabeledDataset, n: int, seed: int) -> SamplePool:
    """Draw ``n`` unlabelled inputs uniformly without replacement."""
    if n > len(ds):
        raise InsufficientDataError(f"requested {n} samples from a dataset of {len(ds)}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(ds), size=n, replace=False)) if n else np.zeros(0, np.int64)
    return SamplePool(ds.images[idx], seed, idx)


def batches(ds: LabeledDataset, batch_size: int, seed: int = 0,
            shuffle: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(inputs, labels)`` mini-batches covering each sample exactly once."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(ds))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]


def carve_validation(ds: LabeledDataset, n: int = 1000, seed: int = 0):
    """Split off ``n`` random samples as a validation set: returns (train, val)."""
    if n > len(ds):
        raise InsufficientDataError(f"validation size {n} exceeds dataset size {len(ds)}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    val_idx, train_idx = np.sort(perm[:n]), np.sort(perm[n:])
    return ds.subset(train_idx), ds.subset(val_idx, f"{ds.name}:val")


def concat(datasets: Sequence[LabeledDataset], name="concat") -> LabeledDataset:
    return LabeledDataset(np.concatenate([d.images for d in datasets]),
                          np.concatenate([d.labels for d in datasets]),
                          max(d.class_count for d in datasets), name)
