"""Nearest-class-mean classification and continual-learning metrics."""

from __future__ import annotations

import numpy as np

from .embedding import embed
from .errors import DataError, DimensionError, ProtocolError


def ncm_classify(queries, memory):
    """Nearest prototype by squared Euclidean distance; ties go to the smallest class id."""
    ids, protos = memory.as_arrays(order="id")
    if len(ids) == 0:
        raise ProtocolError("prototype memory is empty")
    queries = np.atleast_2d(np.asarray(queries))
    if queries.shape[1] != protos.shape[1]:
        raise DimensionError(f"query dim {queries.shape[1]} != prototype dim {protos.shape[1]}")
    diff = queries[:, None, :] - protos[None, :, :]
    dist = np.einsum("ijk,ijk->ij", diff, diff)
    # ids are sorted ascending and argmin returns the first minimum
    return ids[np.argmin(dist, axis=1)]


class AccuracyMatrix:
    """Lower-triangular ``a[k, j]``: accuracy on task ``j`` after training ``k`` tasks (1-based)."""

    def __init__(self, num_tasks):
        self.num_tasks = int(num_tasks)
        self._a = np.full((self.num_tasks, self.num_tasks), np.nan)

    @classmethod
    def from_rows(cls, rows, num_tasks=None):
        mat = cls(num_tasks or len(rows))
        for k, row in enumerate(rows, start=1):
            mat.set_row(k, row)
        return mat

    def set_row(self, k, row):
        row = np.asarray(row, dtype=np.float64)
        if not 1 <= k <= self.num_tasks or len(row) != k:
            raise ProtocolError(f"row {k} must hold exactly {k} entries")
        if np.any(row < 0) or np.any(row > 1):
            raise ValueError("accuracies must lie in [0, 1]")
        self._a[k - 1, :k] = row

    def row(self, k):
        if not 1 <= k <= self.num_tasks or np.isnan(self._a[k - 1, :k]).any():
            raise ProtocolError(f"row {k} is not populated")
        return self._a[k - 1, :k].copy()

    def __getitem__(self, kj):
        k, j = kj
        return float(self._a[k - 1, j - 1])

    def populated_rows(self):
        return sum(1 for k in range(1, self.num_tasks + 1) if not np.isnan(self._a[k - 1, :k]).any())

    def to_lists(self):
        return [self.row(k).tolist() for k in range(1, self.populated_rows() + 1)]


def average_incremental_accuracy(matrix, k):
    return float(np.mean(matrix.row(k)))


def average_forgetting(matrix, k):
    """Mean over ``j < k`` of ``max_{l < k} (a[l, j] - a[k, j])``; may be negative."""
    if k < 2:
        raise ProtocolError("forgetting is defined from the second task on")
    current = matrix.row(k)
    drops = []
    for j in range(1, k):
        best = max(matrix[l, j] for l in range(j, k))
        drops.append(best - current[j - 1])
    return float(np.mean(drops))


def evaluate_after_task(k, stream, model, memory, translator=None):
    """Row ``k`` of the accuracy matrix.

    Test samples of every seen task are embedded with the current model,
    passed through ``translator`` (identity when ``None``), and classified
    against the whole memory without task identity.
    """
    row = []
    for j in range(1, k + 1):
        task = stream[j - 1]
        if task.x_test is None or len(task.y_test) == 0:
            raise DataError(f"task {j} has no test split")
        z = embed(model, task.x_test)
        if translator is not None:
            z = translator(z)
        pred = ncm_classify(z, memory)
        row.append(float(np.mean(pred == task.y_test)))
    return row
