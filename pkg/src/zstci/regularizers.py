"""Forgetting penalties (LwF, EWC, MAS) and parameter-importance estimators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nc
from .embedding import embed, embed_graph, mine_triplets, minibatches, triplet_loss
from .errors import EstimationError, ProtocolError

ESTIMATORS = ("fisher", "mas")


@dataclass(frozen=True)
class ImportanceMap:
    weights: nc.ParamSet
    estimator: str

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator tag {self.estimator!r}")
        for name, w in self.weights.items():
            if not np.all(np.isfinite(w)) or np.any(w < 0):
                raise EstimationError(f"importance for {name!r} must be finite and non-negative")

    def __getitem__(self, name):
        return self.weights[name]

    def accumulate(self, other):
        """Elementwise sum with a newer map of the same layout."""
        if not self.weights.same_layout(other.weights):
            raise ProtocolError("cannot accumulate importance maps with different layouts")
        return ImportanceMap(
            nc.ParamSet({k: self.weights[k] + other.weights[k] for k in self.weights}),
            other.estimator,
        )


def _check_same_arch(a, b):
    if a.arch != b.arch or not a.params.same_layout(b.params):
        raise ProtocolError(f"models differ in architecture: {a.arch} vs {b.arch}")


def lwf_penalty(cur_model, prev_model, batch, params=None):
    """Frobenius norm of the difference between current and previous embeddings.

    Only ``cur_model`` (or ``params``, when given as graph leaves) carries
    gradient; the previous embeddings enter as constants.
    """
    _check_same_arch(cur_model, prev_model)
    z_prev = embed(prev_model, batch)
    z_cur = embed_graph(cur_model, cur_model.params if params is None else params, batch)
    return nc.frobenius_norm(z_cur - z_prev)


def quadratic_penalty(cur_params, prev_params, importance):
    """``0.5 * sum_p w_p (cur_p - prev_p)^2``; shared by EWC and MAS."""
    weights = importance.weights if isinstance(importance, ImportanceMap) else importance
    names = list(prev_params)
    if list(cur_params) != names or list(weights) != names:
        raise ProtocolError("parameter, snapshot and importance names differ")
    total = None
    for name in names:
        cur, prev, w = cur_params[name], prev_params[name], weights[name]
        if nc.value_of(cur).shape != np.shape(prev) or np.shape(w) != np.shape(prev):
            raise ProtocolError(f"shape mismatch for {name!r}")
        term = nc.sum_(nc.mul(w, nc.square(nc.sub(cur, prev))))
        total = term if total is None else total + term
    if total is None:
        return nc.Var(np.asarray(0.0), op="const")
    return nc.scale(total, 0.5)


def _batches(n, batch_size, num_batches, rng):
    """``num_batches`` minibatches, cycling through fresh permutations; ``None`` means one full batch."""
    if num_batches is None or batch_size is None or batch_size >= n:
        return [np.arange(n)]
    out = []
    while len(out) < num_batches:
        out.extend(minibatches(n, batch_size, rng))
    return out[:num_batches]


def estimate_fisher(model, task, num_batches=None, rng=None, batch_size=None, margin=0.3, mining="all-valid"):
    """Diagonal Fisher: mean over batches of the squared triplet-loss gradient."""
    n = task.n_train
    if rng is None:
        rng = np.random.default_rng(0)
    acc = {k: np.zeros_like(v) for k, v in model.params.items()}
    used = 0
    for idx in _batches(n, batch_size, num_batches, rng):
        trips = mine_triplets(task.y_train[idx], mining, rng)
        if len(trips) == 0:
            continue
        xb = task.x_train[idx]
        rec = nc.grad(lambda p, xb=xb, trips=trips: triplet_loss(embed_graph(model, p, xb), trips, margin), model.params)
        for k in acc:
            acc[k] += rec.grads[k] ** 2
        used += 1
    if used == 0:
        raise EstimationError(f"task {task.index}: no valid triplets for Fisher estimation")
    return ImportanceMap(nc.ParamSet({k: v / used for k, v in acc.items()}), "fisher")


def estimate_mas(model, task, num_batches=None, rng=None, batch_size=None):
    """MAS importance: mean over samples of ``|d ||F(x)||^2 / d theta|``.

    The norm is taken on the raw network output, before any row normalization.
    """
    n = task.n_train
    if rng is None:
        rng = np.random.default_rng(0)
    idx = np.concatenate(_batches(n, batch_size, num_batches, rng))
    if len(idx) == 0:
        raise EstimationError(f"task {task.index}: no samples for MAS estimation")
    acc = {k: np.zeros_like(v) for k, v in model.params.items()}
    for i in idx:
        xi = task.x_train[i : i + 1]
        rec = nc.grad(
            lambda p, xi=xi: nc.sum_(nc.square(embed_graph(model, p, xi, normalize=False))),
            model.params,
        )
        for k in acc:
            acc[k] += np.abs(rec.grads[k])
    return ImportanceMap(nc.ParamSet({k: v / len(idx) for k, v in acc.items()}), "mas")
