"""Datasets, task streams and loaders.

A ``TaskStream`` is an ordered list of tasks; task ``t`` owns the global
classes ``class_offset .. class_offset + class_count - 1`` and stores its
labels re-indexed from 0.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InvalidInputError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    label_map: dict | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise InvalidInputError(f"features must be a non-empty N x d matrix, got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise InvalidInputError(
                f"{self.labels.shape[0] if self.labels.ndim else 0} labels for {self.features.shape[0]} examples"
            )
        if self.class_count < 1 or self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise InvalidInputError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(self.features)):
            raise InvalidInputError("features contain non-finite values")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.class_count, self.label_map)


@dataclass
class Task:
    train: Dataset
    test: Dataset
    class_offset: int

    @property
    def class_count(self) -> int:
        return self.train.class_count


@dataclass
class TaskStream:
    tasks: list[Task]

    def __post_init__(self):
        if not self.tasks:
            raise InvalidInputError("a task stream needs at least one task")
        expected = 0
        dim = self.tasks[0].train.dim
        for t, task in enumerate(self.tasks):
            if task.class_offset != expected:
                raise InvalidInputError(f"task {t} has class offset {task.class_offset}, expected {expected}")
            if task.test.class_count != task.train.class_count:
                raise InvalidInputError(f"task {t} train/test class counts differ")
            if task.train.dim != dim or task.test.dim != dim:
                raise InvalidInputError(f"task {t} feature width differs from task 0 ({dim})")
            expected += task.class_count

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    def __iter__(self):
        return iter(self.tasks)

    @property
    def dim(self) -> int:
        return self.tasks[0].train.dim

    @property
    def head_sizes(self) -> list[int]:
        return [t.class_count for t in self.tasks]

    def prefix(self, n: int) -> "TaskStream":
        return TaskStream(self.tasks[:n])


@dataclass(frozen=True)
class SyntheticSpec:
    dim: int = 8
    classes_per_task: int = 2
    tasks: int = 4
    samples_per_class: int = 200
    cluster_spread: float = 1.0
    # Minimum distance between class means, in units of cluster_spread.
    separation: float = 6.0
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("dim", "classes_per_task", "tasks", "samples_per_class"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if not self.cluster_spread > 0:
            raise InvalidInputError("cluster_spread must be positive")
        if not self.separation > 0:
            raise InvalidInputError("separation must be positive")
        if not 0 < self.test_fraction < 1:
            raise InvalidInputError("test_fraction must lie in (0, 1)")


def _class_means(n_classes, dim, min_dist, rng):
    """Random points on a sphere, redrawn (and the sphere grown) until far enough apart."""
    radius = min_dist
    while True:
        for _ in range(100):
            dirs = rng.normal(size=(n_classes, dim))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            means = radius * dirs
            if n_classes == 1:
                return means
            d = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
            if d[np.triu_indices(n_classes, 1)].min() >= min_dist:
                return means
        radius *= 1.1


def _split_counts(n, test_fraction):
    n_test = int(round(n * test_fraction))
    return n - n_test, n_test


def gen_synthetic(spec: SyntheticSpec | None = None) -> TaskStream:
    """Seeded Gaussian-cluster classification tasks.

    Every class is an isotropic Gaussian around its own mean; each class's
    samples are split ``1 - test_fraction`` / ``test_fraction`` into
    train/test.
    """
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(spec.seed)
    n_classes = spec.tasks * spec.classes_per_task
    means = _class_means(n_classes, spec.dim, spec.separation * spec.cluster_spread, rng)
    n_train, _ = _split_counts(spec.samples_per_class, spec.test_fraction)
    tasks = []
    for t in range(spec.tasks):
        xs_tr, ys_tr, xs_te, ys_te = [], [], [], []
        for c in range(spec.classes_per_task):
            g = t * spec.classes_per_task + c
            x = means[g] + spec.cluster_spread * rng.normal(size=(spec.samples_per_class, spec.dim))
            xs_tr.append(x[:n_train])
            xs_te.append(x[n_train:])
            ys_tr.append(np.full(n_train, c))
            ys_te.append(np.full(spec.samples_per_class - n_train, c))
        train = Dataset(np.concatenate(xs_tr), np.concatenate(ys_tr), spec.classes_per_task)
        test = Dataset(np.concatenate(xs_te), np.concatenate(ys_te), spec.classes_per_task)
        perm_tr = rng.permutation(len(train))
        perm_te = rng.permutation(len(test))
        tasks.append(Task(train.subset(perm_tr), test.subset(perm_te), t * spec.classes_per_task))
    return TaskStream(tasks)


def _class_groups(class_count, n_tasks, shuffle, rng):
    if n_tasks < 1:
        raise InvalidInputError("number of tasks must be >= 1")
    remainder = class_count % n_tasks
    if remainder:
        raise InvalidInputError(
            f"{class_count} classes cannot be split into {n_tasks} equal tasks (remainder {remainder})"
        )
    order = np.arange(class_count)
    if shuffle:
        order = rng.permutation(class_count)
    return order.reshape(n_tasks, class_count // n_tasks)


def _take_group(ds: Dataset, group) -> Dataset:
    local = np.full(ds.class_count, -1)
    local[group] = np.arange(len(group))
    mask = local[ds.labels] >= 0
    return Dataset(ds.features[mask], local[ds.labels[mask]], len(group))


def _stratified_split(ds: Dataset, test_fraction, rng):
    train_idx, test_idx = [], []
    for c in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_tr, _ = _split_counts(len(idx), test_fraction)
        train_idx.append(idx[:n_tr])
        test_idx.append(idx[n_tr:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(test_idx))


def split_classes(full: Dataset, n_tasks: int, test: Dataset | None = None, test_fraction=0.2,
                  shuffle_classes=False, seed=0) -> TaskStream:
    """Partition the classes of ``full`` into ``n_tasks`` contiguous groups.

    Classes are taken in label order (or a seeded shuffle with
    ``shuffle_classes``). If no separate ``test`` set is given, a stratified
    ``test_fraction`` of every class is held out.
    """
    rng = np.random.default_rng(seed)
    groups = _class_groups(full.class_count, n_tasks, shuffle_classes, rng)
    if test is None:
        tr, te = _stratified_split(full, test_fraction, rng)
        full, test = full.subset(tr), full.subset(te)
    elif test.class_count != full.class_count:
        raise InvalidInputError("train and test sets have different class counts")
    tasks = []
    for t, group in enumerate(groups):
        tasks.append(Task(_take_group(full, group), _take_group(test, group), t * len(group)))
    return TaskStream(tasks)


def _read_idx_header(buf: bytes, expected_magic: int, path):
    if len(buf) < 4:
        raise FormatError(f"{path}: truncated IDX header", len(buf))
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = buf[3]
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise FormatError(f"{path}: truncated IDX dimensions", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:end])
    size = int(np.prod(dims))
    if len(buf) < end + size:
        raise FormatError(f"{path}: truncated IDX payload, need {size} bytes", len(buf))
    if len(buf) > end + size:
        raise FormatError(f"{path}: {len(buf) - end - size} trailing bytes", end + size)
    return dims, np.frombuffer(buf, dtype=np.uint8, count=size, offset=end)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair (ubyte data, big-endian header).

    Pixels are scaled to [0, 1] and each image is flattened row-major.
    """
    dims, pixels = _read_idx_header(Path(images_path).read_bytes(), IDX_IMAGE_MAGIC, images_path)
    ldims, labels = _read_idx_header(Path(labels_path).read_bytes(), IDX_LABEL_MAGIC, labels_path)
    if ldims[0] != dims[0]:
        raise FormatError(f"{labels_path}: {ldims[0]} labels for {dims[0]} images", 4)
    features = pixels.reshape(dims[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    return Dataset(features, labels, int(labels.max()) + 1)


def load_csv(path, label_column: str) -> Dataset:
    """Read a numeric CSV with a header row.

    Labels are remapped to ``0..C-1`` in order of first appearance; the
    mapping (original text -> index) is kept in ``label_map``.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{path}: empty file", 1) from None
        if label_column not in header:
            raise ConfigError(f"label column {label_column!r} not in header {header}")
        li = header.index(label_column)
        label_map: dict[str, int] = {}
        rows, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}: line {line_no} has {len(row)} fields, expected {len(header)}", line_no)
            values = []
            for j, cell in enumerate(row):
                if j == li:
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise FormatError(
                        f"{path}: line {line_no}, column {header[j]!r}: non-numeric value {cell!r}", line_no
                    ) from None
            key = row[li].strip()
            labels.append(label_map.setdefault(key, len(label_map)))
            rows.append(values)
    if not rows:
        raise FormatError(f"{path}: no data rows", 2)
    return Dataset(np.array(rows), np.array(labels), len(label_map), label_map)
