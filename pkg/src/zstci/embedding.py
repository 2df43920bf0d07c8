"""Feature extractor, triplet mining and per-task metric training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import numeric as nc
from .errors import ConfigError, DimensionError, ProtocolError

log = logging.getLogger(__name__)

REGULARIZERS = ("none", "lwf", "ewc", "mas")
MINING_POLICIES = ("all-valid", "random-per-anchor")
# trade-off weights used when TrainConfig.reg_weight is left unset
DEFAULT_REG_WEIGHTS = {"none": 0.0, "lwf": 1.0, "ewc": 1e7, "mas": 1e6}


@dataclass(frozen=True)
class EmbeddingModel:
    params: nc.ParamSet
    arch: tuple
    normalize_output: bool = True
    activation: str = "relu"

    @property
    def input_dim(self):
        return self.arch[0]

    @property
    def embed_dim(self):
        return self.arch[-1]

    def with_params(self, params):
        return replace(self, params=params)


def init_embedding_model(arch, rng, normalize_output=True, activation="relu", dtype=np.float64):
    arch = tuple(int(d) for d in arch)
    return EmbeddingModel(nc.init_mlp(arch, rng, dtype=dtype), arch, normalize_output, activation)


def embed_graph(model, params, x, normalize=None):
    """Graph-level forward pass with ``params`` (arrays or Vars)."""
    out = nc.mlp_graph(params, x, model.arch, model.activation)
    if model.normalize_output if normalize is None else normalize:
        out = nc.l2_normalize_rows(out)
    return out


def embed(model, x):
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DimensionError(f"expected a batch of {model.input_dim}-d features, got shape {x.shape}")
    return embed_graph(model, model.params, x).value


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


def mine_triplets(labels, policy="all-valid", rng=None):
    """Index triplets within a batch as an ``(k, 3)`` array of (anchor, positive, negative).

    ``all-valid`` enumerates every combination in lexicographic order.
    ``random-per-anchor`` draws one positive and one negative uniformly for
    every anchor that has both.
    """
    labels = np.asarray(labels)
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(n, dtype=bool)
    neg = ~same
    if policy == "all-valid":
        a, p, q = np.nonzero(pos[:, :, None] & neg[:, None, :])
        return np.stack([a, p, q], axis=1).astype(np.intp)
    if policy == "random-per-anchor":
        if rng is None:
            raise ConfigError("random-per-anchor mining needs an rng")
        rows = []
        for a in range(n):
            ps, ns = np.flatnonzero(pos[a]), np.flatnonzero(neg[a])
            if len(ps) and len(ns):
                rows.append((a, ps[rng.integers(len(ps))], ns[rng.integers(len(ns))]))
        return np.asarray(rows, dtype=np.intp).reshape(-1, 3)
    raise ConfigError(f"unknown mining policy {policy!r}; expected one of {MINING_POLICIES}")


def triplet_loss(embeddings, triplets, margin):
    """Mean hinge ``max(0, d+ - d- + margin)`` over triplets, squared-L2 distances.

    Returns a scalar ``Var`` so the result can be differentiated.
    """
    if not margin > 0:
        raise ConfigError(f"margin must be positive, got {margin}")
    triplets = np.asarray(triplets, dtype=np.intp).reshape(-1, 3)
    z = nc.as_var(embeddings)
    if len(triplets) == 0:
        log.warning("triplet_loss called with no triplets; returning 0")
        return nc.Var(np.asarray(0.0, dtype=z.value.dtype), op="const")
    if triplets.min() < 0 or triplets.max() >= z.shape[0]:
        raise DimensionError("triplet index out of range")
    dist = nc.pairwise_sqdist(z, z)
    d_pos = nc.take2d(dist, triplets[:, 0], triplets[:, 1])
    d_neg = nc.take2d(dist, triplets[:, 0], triplets[:, 2])
    return nc.mean(nc.hinge(d_pos - d_neg + margin))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    margin: float = 0.3
    regularizer: str = "none"
    reg_weight: float | None = None
    mining: str = "all-valid"

    def __post_init__(self):
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"unknown regularizer {self.regularizer!r}; expected one of {REGULARIZERS}")
        if self.mining not in MINING_POLICIES:
            raise ConfigError(f"unknown mining policy {self.mining!r}")
        if not self.margin > 0:
            raise ConfigError("margin must be positive")
        if self.reg_weight is not None and self.reg_weight < 0:
            raise ConfigError("reg_weight must be non-negative")
        if self.epochs < 0 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 0 and batch_size >= 2")

    @property
    def gamma_reg(self):
        if self.reg_weight is None:
            return DEFAULT_REG_WEIGHTS[self.regularizer]
        return self.reg_weight


def minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train_task(model, task, cfg, rng, prev_model=None, importance=None):
    """Optimize ``model`` on one task; returns a new model, inputs untouched.

    Total loss per minibatch is the triplet loss plus ``cfg.gamma_reg`` times
    the chosen regularizer's penalty.  Batches without any valid triplet are
    skipped.
    """
    from . import regularizers as reg

    if cfg.regularizer in ("lwf", "ewc", "mas") and prev_model is None:
        raise ProtocolError(f"regularizer {cfg.regularizer!r} needs the previous model snapshot")
    if cfg.regularizer in ("ewc", "mas") and importance is None:
        raise ProtocolError(f"regularizer {cfg.regularizer!r} needs an importance map")
    if task.input_dim != model.input_dim:
        raise DimensionError(f"task features are {task.input_dim}-d, model expects {model.input_dim}")

    gamma = cfg.gamma_reg
    params = model.params
    state = nc.AdamState.zeros_like(params)
    x_all, y_all = task.x_train, task.y_train
    for _ in range(cfg.epochs):
        for idx in minibatches(len(y_all), cfg.batch_size, rng):
            trips = mine_triplets(y_all[idx], cfg.mining, rng)
            if len(trips) == 0:
                continue
            xb = x_all[idx]
            prev_z = embed(prev_model, xb) if cfg.regularizer == "lwf" else None

            def loss_fn(p, xb=xb, trips=trips, prev_z=prev_z):
                z = embed_graph(model, p, xb)
                loss = triplet_loss(z, trips, cfg.margin)
                if cfg.regularizer == "lwf":
                    loss = loss + nc.scale(nc.frobenius_norm(z - prev_z), gamma)
                elif cfg.regularizer in ("ewc", "mas"):
                    pen = reg.quadratic_penalty(p, prev_model.params, importance)
                    loss = loss + nc.scale(pen, gamma)
                return loss

            rec = nc.grad(loss_fn, params)
            params = nc.adam_step(params, rec, state, cfg.lr)
    return model.with_params(params)
