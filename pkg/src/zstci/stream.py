"""Class-disjoint task sequences from synthetic clusters or feature CSV files."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, FormatError

TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class TaskDataset:
    index: int
    classes: tuple
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_train(self):
        return len(self.y_train)

    @property
    def n_classes(self):
        return len(self.classes)

    @property
    def input_dim(self):
        return self.x_train.shape[1]

    def validate(self):
        classes = set(self.classes)
        if set(np.unique(self.y_train).tolist()) - classes or set(np.unique(self.y_test).tolist()) - classes:
            raise DataError(f"task {self.index}: labels outside the task's class set")
        if not np.all(np.isfinite(self.x_train)) or not np.all(np.isfinite(self.x_test)):
            raise DataError(f"task {self.index}: non-finite features")
        for c in self.classes:
            n = int(np.sum(self.y_train == c))
            if n < 2:
                raise DataError(f"task {self.index}: class {c} has {n} train samples, need at least 2")


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple
    seed: int

    def __post_init__(self):
        seen = set()
        for task in self.tasks:
            overlap = seen & set(task.classes)
            if overlap:
                raise DataError(f"task {task.index} repeats classes {sorted(overlap)}")
            seen |= set(task.classes)
            task.validate()

    @property
    def classes(self):
        return tuple(c for task in self.tasks for c in task.classes)

    @property
    def num_tasks(self):
        return len(self.tasks)

    @property
    def input_dim(self):
        return self.tasks[0].input_dim

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    def __iter__(self):
        return iter(self.tasks)


def _task_sizes(n_classes, num_tasks):
    base, rem = divmod(n_classes, num_tasks)
    return [base + 1 if i < rem else base for i in range(num_tasks)]


def _split_counts(n):
    n_test = int(n * (1.0 - TRAIN_FRACTION) + 1e-9)
    return n - n_test, n_test


def _sample_means(rng, n, dim, spread, max_retries=100):
    means = []
    min_sep = 4.0 * spread
    for _ in range(n):
        cand = rng.uniform(-1.0, 1.0, size=dim)
        for _ in range(max_retries):
            if not means or min(np.linalg.norm(cand - m) for m in means) >= min_sep:
                break
            cand = rng.uniform(-1.0, 1.0, size=dim)
        means.append(cand)
    return np.array(means)


def make_synthetic_stream(
    num_tasks,
    classes_per_task,
    samples_per_class,
    input_dim,
    cluster_spread,
    seed,
    dtype=np.float64,
):
    """Isotropic Gaussian clusters, one class per cluster, split 80/20 per class."""
    if min(num_tasks, classes_per_task, samples_per_class, input_dim) < 1:
        raise ConfigError("num_tasks, classes_per_task, samples_per_class and input_dim must be >= 1")
    if classes_per_task < 2:
        raise ConfigError("classes_per_task must be >= 2 so triplets have negatives")
    n_train, n_test = _split_counts(samples_per_class)
    if n_train < 2:
        raise ConfigError("samples_per_class too small: each class needs >= 2 train samples")
    if cluster_spread < 0:
        raise ConfigError("cluster_spread must be non-negative")
    rng = np.random.default_rng(seed)
    n_classes = num_tasks * classes_per_task
    means = _sample_means(rng, n_classes, input_dim, cluster_spread)
    tasks = []
    for t in range(num_tasks):
        classes = tuple(range(t * classes_per_task, (t + 1) * classes_per_task))
        xs_tr, ys_tr, xs_te, ys_te = [], [], [], []
        for c in classes:
            pts = means[c] + cluster_spread * rng.standard_normal((samples_per_class, input_dim))
            xs_tr.append(pts[:n_train])
            xs_te.append(pts[n_train:])
            ys_tr.append(np.full(n_train, c))
            ys_te.append(np.full(n_test, c))
        tasks.append(
            TaskDataset(
                t + 1,
                classes,
                np.concatenate(xs_tr).astype(dtype),
                np.concatenate(ys_tr),
                np.concatenate(xs_te).astype(dtype).reshape(-1, input_dim),
                np.concatenate(ys_te),
            )
        )
    return TaskStream(tuple(tasks), seed)


def shuffle_classes(classes, seed):
    """Order ``classes`` by uniform keys drawn from ``default_rng(seed)``."""
    classes = sorted(classes)
    keys = np.random.default_rng(seed).random(len(classes))
    return [classes[i] for i in np.argsort(keys, kind="stable")]


def partition_classes(classes, num_tasks, seed):
    """Shuffle, then cut into ``num_tasks`` groups; earlier groups take the remainder."""
    if num_tasks < 1:
        raise ConfigError("num_tasks must be >= 1")
    if len(classes) < 2 * num_tasks:
        raise DataError(f"{len(classes)} classes cannot fill {num_tasks} tasks with >= 2 classes each")
    order = shuffle_classes(classes, seed)
    groups, start = [], 0
    for size in _task_sizes(len(order), num_tasks):
        groups.append(tuple(order[start : start + size]))
        start += size
    return groups


def read_feature_csv(path, header=False):
    labels, rows, width = [], [], None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if header and lineno == 1:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise FormatError("expected a label and at least one feature", lineno)
            elif len(row) != width:
                raise FormatError(f"expected {width} fields, found {len(row)}", lineno)
            try:
                label = int(row[0])
                feats = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise FormatError(f"unparseable value ({exc})", lineno) from None
            if label < 0:
                raise FormatError(f"negative label {label}", lineno)
            labels.append(label)
            rows.append(feats)
    if not rows:
        raise DataError(f"{path}: no samples")
    return np.asarray(labels), np.asarray(rows, dtype=np.float64)


def load_feature_csv(path, num_tasks, seed, header=False, dtype=np.float64):
    """Build a stream from ``label, f_1, ..., f_d`` rows.

    Classes are shuffled with ``seed`` and cut into ``num_tasks`` groups; each
    class's samples are split 80/20 into train/test with an independent stream
    derived from the same seed.
    """
    labels, feats = read_feature_csv(path, header=header)
    if not np.all(np.isfinite(feats)):
        raise DataError(f"{path}: non-finite feature values")
    groups = partition_classes(np.unique(labels).tolist(), num_tasks, seed)
    split_rng = np.random.default_rng([seed, 1])
    tasks = []
    for t, classes in enumerate(groups):
        xs_tr, ys_tr, xs_te, ys_te = [], [], [], []
        for c in sorted(classes):
            idx = np.flatnonzero(labels == c)
            idx = idx[split_rng.permutation(len(idx))]
            n_train, _ = _split_counts(len(idx))
            if n_train < 2:
                raise DataError(f"class {c} has {n_train} train samples, need at least 2")
            xs_tr.append(feats[idx[:n_train]])
            xs_te.append(feats[idx[n_train:]])
            ys_tr.append(labels[idx[:n_train]])
            ys_te.append(labels[idx[n_train:]])
        tasks.append(
            TaskDataset(
                t + 1,
                tuple(classes),
                np.concatenate(xs_tr).astype(dtype),
                np.concatenate(ys_tr),
                np.concatenate(xs_te).astype(dtype),
                np.concatenate(ys_te),
            )
        )
    return TaskStream(tuple(tasks), seed)
